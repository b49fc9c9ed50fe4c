#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "surgecast/market_data.hpp"

namespace surgecast {

enum class ExtremumKind { LocalMax, LocalMin };

struct ExtremumPoint {
    std::size_t index = 0;
    double price = 0.0;
    ExtremumKind kind = ExtremumKind::LocalMax;

    bool operator==(const ExtremumPoint&) const = default;
};

enum class SwingKind { HH, LL, HL, LH };

std::string to_string(SwingKind kind);

struct SwingEvent {
    std::size_t index = 0;  // bar of the confirming extremum
    SwingKind kind = SwingKind::HH;
    /// (P_end - P_start) / P_start from the oldest extremum of the chain to the
    /// confirming one.
    double delta_p = 0.0;
    /// Indices of the K earlier same-kind extrema in the chain, oldest first.
    std::vector<std::size_t> confirmed_by;

    bool operator==(const SwingEvent&) const = default;
};

struct LabelingConfig {
    std::size_t extrema_window = 5;
    std::size_t confirmations = 2;
    double uptrend_threshold = 0.005;

    void check() const;
};

void to_json(nlohmann::json& j, const LabelingConfig& cfg);
void from_json(const nlohmann::json& j, LabelingConfig& cfg);

struct TargetSeries {
    std::vector<int> labels;
    std::size_t positive_count = 0;
    std::vector<SwingEvent> events;
};

/// A bar is a LocalMax when its price is strictly above every other price in
/// the centered window; bars without a full half-window on each side never
/// qualify. O(n) via sliding half-window maxima.
std::vector<ExtremumPoint> find_local_extrema(std::span<const double> prices, std::size_t window);

/// Compares each extremum with the previous K of the same kind. A strictly
/// rising chain of maxima yields HH, a falling one LH; minima give LL / HL.
std::vector<SwingEvent> classify_swings(std::span<const ExtremumPoint> extrema, std::size_t k);

/// labels[i] = 1 iff an HH event confirms at i with delta_p > threshold.
TargetSeries uptrend_targets(std::span<const double> prices,
                             std::span<const SwingEvent> events,
                             double threshold);

/// Full extrema -> swings -> labels pipeline over close prices.
TargetSeries label_series(std::span<const double> prices, const LabelingConfig& cfg);

/// timestamp,label,event_kind,delta_p; the last two are empty unless an event
/// confirms at that bar.
void write_labels_csv(std::ostream& sink,
                      std::span<const std::int64_t> timestamps,
                      const TargetSeries& targets);

struct LabelRow {
    std::int64_t timestamp = 0;
    int label = 0;
};

/// Reads the first two columns of write_labels_csv output.
std::vector<LabelRow> parse_labels_csv(std::istream& source);
std::vector<LabelRow> read_labels_csv(const std::string& path);

/// Normalized features with one label per frame row.
struct Dataset {
    FeatureFrame frame;
    std::vector<int> labels;

    std::size_t rows() const noexcept { return frame.rows(); }
};

/// Aligns bar-indexed targets with the frame rows that survived warm-up.
Dataset attach_labels(const FeatureFrame& frame, const TargetSeries& targets);

/// Pairs each frame row with the label row of the same timestamp. `rows` must
/// be sorted by timestamp.
Dataset join_labels(const FeatureFrame& frame, std::span<const LabelRow> rows);

/// Bars with timestamp < cutoff go to train, the rest to test, order kept.
/// Normalization statistics are recomputed from the train rows and applied to
/// both sides.
std::pair<Dataset, Dataset> split_chronological(const FeatureFrame& frame,
                                                const TargetSeries& targets,
                                                std::int64_t cutoff);

/// Splits off the trailing `fraction` of rows without renormalizing.
std::pair<Dataset, Dataset> split_tail(const Dataset& data, double fraction);

/// Sliding windows over a dataset. Window k covers rows
/// [k*stride, k*stride + length) and carries the label of its last row.
class WindowSet {
public:
    WindowSet() = default;
    WindowSet(const Dataset& data, std::size_t length, std::size_t stride);

    std::size_t size() const noexcept { return labels_.size(); }
    std::size_t length() const noexcept { return length_; }
    std::size_t features() const noexcept { return features_; }
    std::size_t stride() const noexcept { return stride_; }

    int label(std::size_t k) const { return labels_.at(k); }
    std::span<const int> labels() const noexcept { return labels_; }
    std::size_t end_row(std::size_t k) const { return (k * stride_) + length_ - 1; }
    std::int64_t end_timestamp(std::size_t k) const { return timestamps_.at(end_row(k)); }

    /// Row-major length x features copy of window k.
    std::vector<double> window(std::size_t k) const;

    /// Copies the selected windows back to back into `out`
    /// (ids.size() x length x features).
    template <typename T>
    void fill(std::span<const std::size_t> ids, std::span<T> out) const {
        const std::size_t block = length_ * features_;
        if (out.size() != ids.size() * block) throw std::invalid_argument("WindowSet::fill: output size");
        for (std::size_t b = 0; b < ids.size(); ++b) {
            const double* src = rows_.data() + (ids[b] * stride_ * features_);
            for (std::size_t i = 0; i < block; ++i) out[(b * block) + i] = static_cast<T>(src[i]);
        }
        reads_->fetch_add(ids.size(), std::memory_order_relaxed);
    }

    /// Number of windows handed out through window() and fill().
    std::size_t reads() const noexcept { return reads_->load(std::memory_order_relaxed); }

private:
    std::size_t length_ = 0;
    std::size_t stride_ = 1;
    std::size_t features_ = 0;
    std::vector<double> rows_;  // row-major copy of the frame
    std::vector<std::int64_t> timestamps_;
    std::vector<int> labels_;
    std::shared_ptr<std::atomic<std::size_t>> reads_ = std::make_shared<std::atomic<std::size_t>>(0);
};

WindowSet make_windows(const Dataset& data, std::size_t length, std::size_t stride = 1);

}  // namespace surgecast
