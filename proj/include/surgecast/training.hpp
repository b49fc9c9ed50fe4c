#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "surgecast/evaluation.hpp"
#include "surgecast/labeling.hpp"
#include "surgecast/models.hpp"
#include "surgecast/optim.hpp"

namespace surgecast {

enum class ClassWeightMode { None, Balanced };

std::string to_string(ClassWeightMode mode);
ClassWeightMode parse_class_weight_mode(const std::string& name);

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    AdamConfig adam;
    ClassWeightMode class_weights = ClassWeightMode::Balanced;
    std::uint64_t seed = 7;
    std::size_t eval_every = 1;

    void check() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Balanced: w_c = N / (2 N_c). None: [1, 1]. Throws when a class is absent.
std::array<double, 2> compute_class_weights(std::span<const int> labels, ClassWeightMode mode);

struct HistoryEntry {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<MetricsReport> validation;
};

void to_json(nlohmann::json& j, const HistoryEntry& e);
void from_json(const nlohmann::json& j, HistoryEntry& e);

/// One JSON object per line.
void write_history_jsonl(std::ostream& sink, std::span<const HistoryEntry> history);

struct Checkpoint {
    Model<float> model;
    TrainConfig train_config;
    AdamState<float> adam;
    std::size_t epoch = 0;
    std::vector<HistoryEntry> history;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ProgressFn = std::function<void(const HistoryEntry&)>;

/// Minibatch Adam on class-weighted cross-entropy. Initialization, batch order
/// and dropout masks each draw from their own substream of cfg.seed.
/// Validation runs every eval_every epochs when `validation` is non-empty.
Checkpoint train(const ModelConfig& model_cfg,
                 const WindowSet& train_windows,
                 const WindowSet* validation,
                 const TrainConfig& cfg,
                 const ProgressFn& progress = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { MagicMismatch, UnsupportedVersion, Truncated, ChecksumMismatch, Malformed };

    CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, std::ostream& sink);
Checkpoint load_checkpoint(std::istream& source);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace surgecast
