#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "surgecast/labeling.hpp"
#include "surgecast/models.hpp"

namespace surgecast {

/// Class 1 (Uptrend) is the positive class.
struct ConfusionMatrix {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels);

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Harmonic mean of p and r; 0 when both are 0.
double f1_score(double precision, double recall);

/// Scores with `positive_class` treated as positive. Every 0/0 is 0.
ClassScores precision_recall_f1(const ConfusionMatrix& cm, int positive_class);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

inline constexpr std::array<const char*, 2> kClassNames = {"NoUptrend", "Uptrend"};

struct MetricsReport {
    std::string model;
    double threshold = 0.5;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::array<ClassMetrics, 2> per_class;
    ConfusionMatrix confusion;
};

/// Unweighted mean of the two per-class F1 values.
double macro_f1(const MetricsReport& report);

MetricsReport make_report(const ConfusionMatrix& cm, double threshold, std::string model = {});

/// JSON with every real rounded to 6 decimals.
void to_json(nlohmann::json& j, const MetricsReport& report);
void from_json(const nlohmann::json& j, MetricsReport& report);

/// Class 1 iff p1 > threshold. At 0.5 this is the argmax of the two logits
/// with ties going to class 0.
std::vector<int> predict_classes(std::span<const double> p1, double threshold);

MetricsReport report_from_probabilities(std::span<const double> p1,
                                        std::span<const int> labels,
                                        double threshold,
                                        std::string model = {});

/// Softmax probability of class 1 for every window, in evaluation mode.
std::vector<double> predict_probabilities(const Model<float>& model, const WindowSet& windows, std::size_t batch_size = 64);

MetricsReport classification_report(const Model<float>& model, const WindowSet& windows, double threshold = 0.5);

struct SweepRow {
    double threshold = 0.0;
    double precision1 = 0.0;
    double recall1 = 0.0;
    double f1_1 = 0.0;
};

std::vector<SweepRow> threshold_sweep(std::span<const double> p1,
                                      std::span<const int> labels,
                                      std::span<const double> thresholds);

/// "lo..hi" or "lo..hi:step" (default step 0.05), inclusive of hi.
std::vector<double> parse_sweep(const std::string& spec);

/// threshold,precision1,recall1,f1_1
void write_sweep_csv(std::ostream& sink, std::span<const SweepRow> rows);

}  // namespace surgecast
