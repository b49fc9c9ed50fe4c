#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "surgecast/optim.hpp"
#include "surgecast/random.hpp"
#include "surgecast/tensor.hpp"

namespace surgecast {

enum class Arch { Simple, Conv, BreakGPT };

/// "simple", "conv", "breakgpt".
std::string to_string(Arch arch);
/// Throws std::invalid_argument naming the valid strings.
Arch parse_arch(std::string_view name);

struct ModelConfig {
    Arch arch = Arch::Conv;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t ff_dim = 256;
    std::size_t conv_kernel = 3;    // Conv only
    std::size_t prompt_tokens = 16;  // BreakGPT only
    std::size_t window = 64;
    std::size_t n_features = 8;
    double dropout = 0.1;  // inside attention/feed-forward blocks

    void check() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

inline constexpr std::string_view kPromptText =
    "Predict if the current sequence signals the start of a sharp upward movement at the end.";

template <std::floating_point T>
struct Model {
    ModelConfig config;
    ParameterSet<T> params;
    /// Recorded wording of the prompt whose role the learned rows play.
    std::string prompt_text;

    /// The learnable prompt rows [P x d_model]; BreakGPT only.
    const Tensor<T>& prompt() const { return params.at("prompt.embeddings"); }

    template <std::floating_point U>
    Model<U> cast() const {
        return {config, params.template cast<U>(), prompt_text};
    }
};

/// Deterministic initialization; every parameter draws from its own substream
/// of `seed`, keyed by its name.
template <std::floating_point T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;  // dropout masks; required when training with dropout > 0
};

/// Sinusoidal table [L x d]: sin at even columns, cos at odd ones.
template <std::floating_point T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d);

template <std::floating_point T>
struct AttentionResult {
    Tensor<T> output;   // [B x L x d]
    Tensor<T> weights;  // [(B*H) x L x L], rows sum to one
};

/// Scaled dot-product attention with parameters "<prefix>.{q,k,v,out}.{weight,bias}".
template <std::floating_point T>
AttentionResult<T> multi_head_attention(const Tensor<T>& x,
                                        const ParameterSet<T>& params,
                                        const std::string& prefix,
                                        std::size_t n_heads,
                                        bool causal);

template <std::floating_point T>
Tensor<T> simple_transformer_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt = {});

template <std::floating_point T>
Tensor<T> conv_transformer_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt = {});

template <std::floating_point T>
Tensor<T> breakgpt_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt = {});

/// BreakGPT over a batch of any length L' >= window, reading the head at the
/// last series position of the configured window (P + window - 1). Positions
/// after it cannot influence the logits under the causal mask.
template <std::floating_point T>
Tensor<T> breakgpt_forward_at(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt = {});

/// Dispatches on model.config.arch. batch is [B x window x n_features].
template <std::floating_point T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt = {});

}  // namespace surgecast
