#include "surgecast/synthesis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "surgecast/random.hpp"

namespace surgecast {

void SynthConfig::check() const {
    if (n_bars == 0) throw SynthError("n_bars must be positive");
    if (!(start_price > 0.0)) throw SynthError("start_price must be positive");
    if (!(volatility >= 0.0)) throw SynthError("volatility must be non-negative");
    if (surge_duration == 0) throw SynthError("surge_duration must be positive");
    if (surge_alignment == 0) throw SynthError("surge_alignment must be positive");
    if (interval_seconds <= 0) throw SynthError("interval_seconds must be positive");
}

void to_json(nlohmann::json& j, const SynthConfig& cfg) {
    j = {{"n_bars", cfg.n_bars},
         {"start_price", cfg.start_price},
         {"drift", cfg.drift},
         {"volatility", cfg.volatility},
         {"surge_count", cfg.surge_count},
         {"surge_magnitude", cfg.surge_magnitude},
         {"surge_duration", cfg.surge_duration},
         {"surge_alignment", cfg.surge_alignment},
         {"start_timestamp", cfg.start_timestamp},
         {"interval_seconds", cfg.interval_seconds},
         {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& cfg) {
    SynthConfig d;
    cfg.n_bars = j.value("n_bars", d.n_bars);
    cfg.start_price = j.value("start_price", d.start_price);
    cfg.drift = j.value("drift", d.drift);
    cfg.volatility = j.value("volatility", d.volatility);
    cfg.surge_count = j.value("surge_count", d.surge_count);
    cfg.surge_magnitude = j.value("surge_magnitude", d.surge_magnitude);
    cfg.surge_duration = j.value("surge_duration", d.surge_duration);
    cfg.surge_alignment = j.value("surge_alignment", d.surge_alignment);
    cfg.start_timestamp = j.value("start_timestamp", d.start_timestamp);
    cfg.interval_seconds = j.value("interval_seconds", d.interval_seconds);
    cfg.seed = j.value("seed", d.seed);
}

BarSeries generate_gbm(const SynthConfig& cfg) {
    cfg.check();
    Rng path(Rng::derive(cfg.seed, "gbm.path"));
    Rng wick(Rng::derive(cfg.seed, "gbm.wick"));
    Rng volume(Rng::derive(cfg.seed, "gbm.volume"));

    BarSeries series;
    series.interval_seconds = cfg.interval_seconds;
    series.bars.reserve(cfg.n_bars);
    double log_move = 0.0;
    double prev_close = cfg.start_price;
    for (std::size_t t = 0; t < cfg.n_bars; ++t) {
        if (t > 0) log_move += cfg.drift + (cfg.volatility * path.normal());
        OhlcBar bar;
        bar.timestamp = cfg.start_timestamp + (static_cast<std::int64_t>(t) * cfg.interval_seconds);
        bar.open = prev_close;
        bar.close = cfg.start_price * std::exp(log_move);
        bar.high = std::max(bar.open, bar.close) * (1.0 + 0.5 * cfg.volatility * wick.uniform());
        bar.low = std::min(bar.open, bar.close) * (1.0 - 0.5 * cfg.volatility * wick.uniform());
        bar.volume = 1000.0 * (0.5 + volume.uniform());
        prev_close = bar.close;
        series.bars.push_back(bar);
    }
    return series;
}

namespace {

// Surge path at u knot spacings from the first peak: flat until three
// spacings before it, then linear between the lead and peak knots, then tail.
double surge_offset(double u) {
    static constexpr auto path = [] {
        constexpr std::size_t lead = std::size(SurgeShape::lead);
        std::array<double, 1 + lead + std::size(SurgeShape::knots)> p{};
        for (std::size_t i = 0; i < lead; ++i) p[1 + i] = SurgeShape::lead[i];
        for (std::size_t i = 0; i < std::size(SurgeShape::knots); ++i) p[1 + lead + i] = SurgeShape::knots[i];
        return p;
    }();
    constexpr double first = -static_cast<double>(std::size(SurgeShape::lead) + 1);
    const double x = u - first;
    if (x <= 0.0) return 0.0;
    const auto last = static_cast<double>(path.size() - 1);
    if (x > last) return SurgeShape::tail;
    if (x == last) return path.back();
    const auto k = static_cast<std::size_t>(x);
    const double frac = x - static_cast<double>(k);
    return path[k] + frac * (path[k + 1] - path[k]);
}

}  // namespace

SurgeInjection inject_surges(const BarSeries& series, const SynthConfig& cfg) {
    cfg.check();
    SurgeInjection out;
    out.series = series;
    if (cfg.surge_count == 0) return out;

    const std::size_t n = series.size();
    const std::size_t duration = cfg.surge_duration;
    const std::size_t align = cfg.surge_alignment;
    const double spacing = static_cast<double>(duration) / static_cast<double>(std::size(SurgeShape::knots) - 1);
    const auto lead_bars = static_cast<std::size_t>(std::ceil(spacing * (std::size(SurgeShape::lead) + 1)));
    // Undisturbed context before the lead-in and after the top keeps the peaks
    // strict extrema even after resampling by `align`.
    const std::size_t context = (2 * align) + 2;
    const std::size_t before = context + lead_bars;
    const std::size_t after = duration + 1 + context;
    const std::size_t slot = n / cfg.surge_count;
    if (slot < before + after + align) {
        throw SynthError(std::to_string(cfg.surge_count) + " surges of footprint " +
                         std::to_string(before + after) + " bars do not fit in " + std::to_string(n) +
                         " bars without overlap");
    }

    Rng placement(Rng::derive(cfg.seed, "surge.placement"));
    for (std::size_t i = 0; i < cfg.surge_count; ++i) {
        const std::size_t lo = (i * slot) + before;
        const std::size_t hi = ((i + 1) * slot) - after;  // inclusive
        std::size_t s = lo + placement.below(hi - lo + 1);
        s -= (s + 1) % align;  // s % align == align - 1
        if (s < lo) s += align;
        if (s > hi) throw SynthError("surge " + std::to_string(i) + " cannot be aligned inside its slot");
        out.starts.push_back(s);
        out.ground_truth.push_back(s + duration);
    }

    const double g = std::log1p(cfg.surge_magnitude);
    std::vector<double> log_offset(n, 0.0);
    for (std::size_t s : out.starts) {
        for (std::size_t t = s - lead_bars; t < n; ++t) {
            const double u = (static_cast<double>(t) - static_cast<double>(s)) / spacing;
            log_offset[t] += g * surge_offset(u);
        }
    }

    for (std::size_t t = 0; t < n; ++t) {
        const auto& src = series.bars[t];
        auto& bar = out.series.bars[t];
        bar.close = src.close * std::exp(log_offset[t]);
        bar.open = t == 0 ? src.open * std::exp(log_offset[t]) : out.series.bars[t - 1].close;
        const double hi_wick = src.high / std::max(src.open, src.close);
        const double lo_wick = src.low / std::min(src.open, src.close);
        bar.high = std::max(bar.open, bar.close) * hi_wick;
        bar.low = std::min(bar.open, bar.close) * lo_wick;
    }
    validate(out.series);
    return out;
}

SurgeInjection synthesize(const SynthConfig& cfg) {
    return inject_surges(generate_gbm(cfg), cfg);
}

}  // namespace surgecast
