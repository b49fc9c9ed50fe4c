#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "surgecast/market_data.hpp"

namespace surgecast {

class SynthError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SynthConfig {
    std::size_t n_bars = 50000;
    double start_price = 100.0;
    double drift = 0.0;        // per-bar log drift
    double volatility = 0.0009;  // per-bar log-return standard deviation
    std::size_t surge_count = 20;
    double surge_magnitude = 0.012;
    /// Bars from the first surge peak to the top; the lead-in dip adds half as
    /// many again before the first peak.
    std::size_t surge_duration = 6;
    /// Surge starts satisfy start % alignment == alignment - 1, so that a
    /// resample by `alignment` keeps the surge knots on bar closes.
    std::size_t surge_alignment = 1;
    std::int64_t start_timestamp = 1706745600;  // 2024-02-01T00:00:00Z
    std::int64_t interval_seconds = 60;
    std::uint64_t seed = 7;

    void check() const;
};

void to_json(nlohmann::json& j, const SynthConfig& cfg);
void from_json(const nlohmann::json& j, SynthConfig& cfg);

/// Geometric Brownian motion closes; open is the previous close, wicks are a
/// seeded fraction of the per-bar volatility.
BarSeries generate_gbm(const SynthConfig& cfg);

struct SurgeInjection {
    BarSeries series;
    /// Bar index at which the uptrend labeling rule fires for each surge.
    std::vector<std::size_t> ground_truth;
    /// Bar of the first peak of each surge.
    std::vector<std::size_t> starts;
};

/// Log-price offsets of the surge path in units of ln(1 + magnitude). Knots
/// are spaced surge_duration / 6 bars apart: a two-knot dip, then three rising
/// peaks separated by pullbacks, so the swing detector sees an HH chain whose
/// last peak is the full move. `tail` is the level held after the surge.
struct SurgeShape {
    static constexpr double lead[2] = {-0.35, -0.35};
    static constexpr double knots[7] = {0.1, -0.3, -0.3, 0.5, 0.15, 0.15, 1.0};
    static constexpr double tail = 0.55;
};

/// Multiplies closes by the surge path at seeded, non-overlapping positions.
SurgeInjection inject_surges(const BarSeries& series, const SynthConfig& cfg);

/// generate_gbm followed by inject_surges.
SurgeInjection synthesize(const SynthConfig& cfg);

}  // namespace surgecast
