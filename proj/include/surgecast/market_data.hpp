#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace surgecast {

/// Raised for malformed input data. `line()` is the 1-based source line, 0 when
/// the problem is not tied to a particular line.
class DataError : public std::runtime_error {
public:
    DataError(const std::string& what, std::size_t line = 0);
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct OhlcBar {
    std::int64_t timestamp = 0;  // epoch seconds, UTC
    double open = 0.0;
    double high = 0.0;
    double low = 0.0;
    double close = 0.0;
    double volume = 0.0;

    bool operator==(const OhlcBar&) const = default;
};

/// Empty string when the bar satisfies the OHLC invariants, otherwise a reason.
std::string ohlc_violation(const OhlcBar& bar);

struct BarSeries {
    std::vector<OhlcBar> bars;
    std::int64_t interval_seconds = 60;
    /// Indices of bars whose timestamp is more than one interval after the
    /// previous bar. Gaps are recorded, never filled.
    std::vector<std::size_t> gaps;

    std::size_t size() const noexcept { return bars.size(); }
    bool empty() const noexcept { return bars.empty(); }
    std::vector<double> closes() const;

    bool operator==(const BarSeries&) const = default;
};

/// Checks timestamp ordering and per-bar invariants and recomputes `gaps`.
/// Throws DataError naming the offending bar index.
void validate(BarSeries& series);

struct CsvSchema {
    std::string timestamp = "timestamp";
    std::string open = "open";
    std::string high = "high";
    std::string low = "low";
    std::string close = "close";
    std::string volume = "volume";
    /// Bar interval. Inferred from the smallest timestamp step when unset.
    std::optional<std::int64_t> interval_seconds;
};

BarSeries parse_ohlc_csv(std::istream& source, const CsvSchema& schema = {});
BarSeries read_ohlc_csv(const std::string& path, const CsvSchema& schema = {});

/// Writes shortest round-trip decimal representations, so parsing the output
/// reproduces every field bit for bit.
void write_ohlc_csv(std::ostream& sink, const BarSeries& series);

/// Aggregates `factor` consecutive bars; a trailing partial group is dropped.
BarSeries resample(const BarSeries& series, std::size_t factor);

// Indicators. Positions without a full lookback hold NaN.

std::vector<double> sma(std::span<const double> prices, std::size_t window);
std::vector<double> ema(std::span<const double> prices, std::size_t span);
/// Wilder RSI. Defined from index `period` on; 0/0 gain/loss maps to 50.
std::vector<double> rsi(std::span<const double> prices, std::size_t period);

struct BollingerBands {
    std::vector<double> mid;
    std::vector<double> upper;
    std::vector<double> lower;
};

/// Mid is the SMA; offset is k population standard deviations of the window.
BollingerBands bollinger(std::span<const double> prices, std::size_t window, double k);

/// Sample standard deviation of log returns, sqrt(sum((r - mean)^2) / (n - 1)).
double log_return_volatility(std::span<const double> prices);

/// Rolling log_return_volatility over the last `window` returns.
std::vector<double> rolling_volatility(std::span<const double> prices, std::size_t window);

struct IndicatorConfig {
    std::size_t sma_window = 20;
    std::size_t ema_span = 20;
    std::size_t rsi_period = 14;
    std::size_t bb_window = 20;
    double bb_k = 2.0;
    std::size_t vol_window = 12;

    void check() const;
    /// Number of leading bars without every indicator defined.
    std::size_t warmup() const;
};

void to_json(nlohmann::json& j, const IndicatorConfig& cfg);
void from_json(const nlohmann::json& j, IndicatorConfig& cfg);

struct ColumnStats {
    double mean = 0.0;
    double std = 0.0;

    bool operator==(const ColumnStats&) const = default;
};

using NormStats = std::map<std::string, ColumnStats>;

nlohmann::json norm_stats_to_json(const NormStats& stats);
NormStats norm_stats_from_json(const nlohmann::json& j);

/// Engineered per-bar features, stored column-major.
struct FeatureFrame {
    std::vector<std::int64_t> timestamps;
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;
    NormStats norm_stats;
    /// Leading bars of the source series removed for indicator warm-up; row r
    /// of the frame is bar r + warmup_dropped of the source.
    std::size_t warmup_dropped = 0;
    bool normalized = false;

    std::size_t rows() const noexcept { return timestamps.size(); }
    std::size_t cols() const noexcept { return columns.size(); }
    const std::vector<double>& column(const std::string& name) const;
};

inline const std::vector<std::string>& feature_names() {
    static const std::vector<std::string> names{
        "close", "sma", "ema", "rsi", "bb_mid", "bb_upper", "bb_lower", "volatility"};
    return names;
}

/// Indicator columns on the raw price scale, warm-up rows trimmed.
FeatureFrame compute_features(const BarSeries& series, const IndicatorConfig& cfg);

/// Population mean and standard deviation per column.
NormStats column_stats(const FeatureFrame& frame);

/// z-normalizes with `stats`. Columns whose standard deviation is zero become
/// all zeros.
FeatureFrame normalize(const FeatureFrame& raw, const NormStats& stats);
FeatureFrame denormalize(const FeatureFrame& frame);

FeatureFrame build_feature_frame(const BarSeries& series,
                                 const IndicatorConfig& cfg,
                                 const std::optional<NormStats>& norm_source = std::nullopt);

/// Timestamp column followed by one column per feature, shortest round-trip
/// formatting so a reread frame is bit-identical.
void write_feature_csv(std::ostream& sink, const FeatureFrame& frame);

/// Reads write_feature_csv output. Normalization metadata is not part of the
/// file and is left empty.
FeatureFrame parse_feature_csv(std::istream& source);
FeatureFrame read_feature_csv(const std::string& path);

}  // namespace surgecast
