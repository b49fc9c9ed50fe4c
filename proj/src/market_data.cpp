#include "surgecast/market_data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace surgecast {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view field, std::string_view column, std::size_t line) {
    T value{};
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size()) {
        throw DataError("malformed number '" + std::string(field) + "' in column '" +
                            std::string(column) + "' at line " + std::to_string(line),
                        line);
    }
    return value;
}

void append_number(std::string& out, double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    out.append(buf.data(), ptr);
}

void require_window(std::size_t window, const char* what) {
    if (window == 0) throw std::invalid_argument(std::string(what) + ": window must be positive");
}

void require_nonempty(std::span<const double> prices, const char* what) {
    if (prices.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace

DataError::DataError(const std::string& what, std::size_t line)
    : std::runtime_error(what), line_(line) {}

std::string ohlc_violation(const OhlcBar& bar) {
    if (!(bar.open > 0 && bar.high > 0 && bar.low > 0 && bar.close > 0)) return "non-positive price";
    if (!std::isfinite(bar.open) || !std::isfinite(bar.high) || !std::isfinite(bar.low) ||
        !std::isfinite(bar.close)) {
        return "non-finite price";
    }
    if (bar.low > bar.high) return "low > high";
    if (bar.low > std::min(bar.open, bar.close)) return "low above open/close";
    if (bar.high < std::max(bar.open, bar.close)) return "high below open/close";
    if (!(bar.volume >= 0) || !std::isfinite(bar.volume)) return "negative volume";
    return {};
}

std::vector<double> BarSeries::closes() const {
    std::vector<double> out;
    out.reserve(bars.size());
    for (const auto& b : bars) out.push_back(b.close);
    return out;
}

void validate(BarSeries& series) {
    if (series.interval_seconds <= 0) throw DataError("interval_seconds must be positive");
    series.gaps.clear();
    for (std::size_t i = 0; i < series.bars.size(); ++i) {
        const auto& bar = series.bars[i];
        if (auto why = ohlc_violation(bar); !why.empty()) {
            throw DataError("bar " + std::to_string(i) + ": " + why);
        }
        if (i == 0) continue;
        auto step = bar.timestamp - series.bars[i - 1].timestamp;
        if (step <= 0) throw DataError("bar " + std::to_string(i) + ": timestamps not increasing");
        if (step < series.interval_seconds) {
            throw DataError("bar " + std::to_string(i) + ": step shorter than interval");
        }
        if (step > series.interval_seconds) series.gaps.push_back(i);
    }
}

BarSeries parse_ohlc_csv(std::istream& source, const CsvSchema& schema) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(source, line)) throw DataError("missing header row", 1);
    ++line_no;

    auto header = split_fields(line);
    auto locate = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (required) throw DataError("missing required column '" + name + "'", 1);
            return std::nullopt;
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t c_ts = *locate(schema.timestamp, true);
    const std::size_t c_open = *locate(schema.open, true);
    const std::size_t c_high = *locate(schema.high, true);
    const std::size_t c_low = *locate(schema.low, true);
    const std::size_t c_close = *locate(schema.close, true);
    const auto c_volume = locate(schema.volume, false);

    BarSeries series;
    std::vector<std::size_t> lines;
    while (std::getline(source, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != header.size()) {
            throw DataError("expected " + std::to_string(header.size()) + " fields, found " +
                                std::to_string(fields.size()) + " at line " + std::to_string(line_no),
                            line_no);
        }
        OhlcBar bar;
        bar.timestamp = parse_number<std::int64_t>(fields[c_ts], schema.timestamp, line_no);
        bar.open = parse_number<double>(fields[c_open], schema.open, line_no);
        bar.high = parse_number<double>(fields[c_high], schema.high, line_no);
        bar.low = parse_number<double>(fields[c_low], schema.low, line_no);
        bar.close = parse_number<double>(fields[c_close], schema.close, line_no);
        if (c_volume) bar.volume = parse_number<double>(fields[*c_volume], schema.volume, line_no);

        if (auto why = ohlc_violation(bar); !why.empty()) {
            throw DataError(why + " at line " + std::to_string(line_no), line_no);
        }
        if (!series.bars.empty() && bar.timestamp <= series.bars.back().timestamp) {
            throw DataError("non-monotonic timestamp at line " + std::to_string(line_no), line_no);
        }
        series.bars.push_back(bar);
        lines.push_back(line_no);
    }

    if (schema.interval_seconds) {
        series.interval_seconds = *schema.interval_seconds;
    } else if (series.bars.size() >= 2) {
        std::int64_t step = std::numeric_limits<std::int64_t>::max();
        for (std::size_t i = 1; i < series.bars.size(); ++i) {
            step = std::min(step, series.bars[i].timestamp - series.bars[i - 1].timestamp);
        }
        series.interval_seconds = step;
    } else {
        throw DataError("cannot infer bar interval from fewer than two rows; set it in the schema");
    }
    if (series.interval_seconds <= 0) throw DataError("interval_seconds must be positive");

    for (std::size_t i = 1; i < series.bars.size(); ++i) {
        auto step = series.bars[i].timestamp - series.bars[i - 1].timestamp;
        if (step < series.interval_seconds) {
            throw DataError("timestamp step shorter than interval at line " + std::to_string(lines[i]),
                            lines[i]);
        }
        if (step > series.interval_seconds) series.gaps.push_back(i);
    }
    return series;
}

BarSeries read_ohlc_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    return parse_ohlc_csv(in, schema);
}

void write_ohlc_csv(std::ostream& sink, const BarSeries& series) {
    std::string out = "timestamp,open,high,low,close,volume\n";
    out.reserve(out.size() + series.bars.size() * 64);
    for (const auto& bar : series.bars) {
        out += std::to_string(bar.timestamp);
        for (double v : {bar.open, bar.high, bar.low, bar.close, bar.volume}) {
            out += ',';
            append_number(out, v);
        }
        out += '\n';
    }
    sink << out;
}

BarSeries resample(const BarSeries& series, std::size_t factor) {
    if (factor == 0) throw std::invalid_argument("resample: factor must be at least 1");
    if (series.empty()) throw std::invalid_argument("resample: empty series");

    BarSeries out;
    out.interval_seconds = series.interval_seconds * static_cast<std::int64_t>(factor);
    const std::size_t groups = series.size() / factor;
    out.bars.reserve(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        const auto first = series.bars.begin() + static_cast<std::ptrdiff_t>(g * factor);
        OhlcBar bar = *first;
        for (auto it = first + 1; it != first + static_cast<std::ptrdiff_t>(factor); ++it) {
            bar.high = std::max(bar.high, it->high);
            bar.low = std::min(bar.low, it->low);
            bar.close = it->close;
            bar.volume += it->volume;
        }
        out.bars.push_back(bar);
    }
    for (std::size_t i = 1; i < out.bars.size(); ++i) {
        if (out.bars[i].timestamp - out.bars[i - 1].timestamp > out.interval_seconds) {
            out.gaps.push_back(i);
        }
    }
    return out;
}

std::vector<double> sma(std::span<const double> prices, std::size_t window) {
    require_window(window, "sma");
    require_nonempty(prices, "sma");
    std::vector<double> out(prices.size(), kNaN);
    double sum = 0.0;
    for (std::size_t i = 0; i < prices.size(); ++i) {
        sum += prices[i];
        if (i >= window) sum -= prices[i - window];
        if (i + 1 >= window) out[i] = sum / static_cast<double>(window);
    }
    return out;
}

std::vector<double> ema(std::span<const double> prices, std::size_t span) {
    require_window(span, "ema");
    require_nonempty(prices, "ema");
    const double alpha = 2.0 / (static_cast<double>(span) + 1.0);
    std::vector<double> out(prices.size());
    out[0] = prices[0];
    for (std::size_t i = 1; i < prices.size(); ++i) {
        out[i] = out[i - 1] + (alpha * (prices[i] - out[i - 1]));
    }
    return out;
}

std::vector<double> rsi(std::span<const double> prices, std::size_t period) {
    require_window(period, "rsi");
    if (prices.size() <= period) {
        throw std::invalid_argument("rsi: need more than " + std::to_string(period) + " prices");
    }
    auto value = [](double gain, double loss) {
        if (loss == 0.0) return gain == 0.0 ? 50.0 : 100.0;
        return 100.0 - 100.0 / (1.0 + gain / loss);
    };

    std::vector<double> out(prices.size(), kNaN);
    const double n = static_cast<double>(period);
    double gain = 0.0;
    double loss = 0.0;
    for (std::size_t i = 1; i <= period; ++i) {
        const double d = prices[i] - prices[i - 1];
        gain += std::max(d, 0.0);
        loss += std::max(-d, 0.0);
    }
    gain /= n;
    loss /= n;
    out[period] = value(gain, loss);
    for (std::size_t i = period + 1; i < prices.size(); ++i) {
        const double d = prices[i] - prices[i - 1];
        gain = (gain * (n - 1.0) + std::max(d, 0.0)) / n;
        loss = (loss * (n - 1.0) + std::max(-d, 0.0)) / n;
        out[i] = value(gain, loss);
    }
    return out;
}

BollingerBands bollinger(std::span<const double> prices, std::size_t window, double k) {
    if (window < 2) throw std::invalid_argument("bollinger: window must be at least 2");
    require_nonempty(prices, "bollinger");
    BollingerBands bands;
    bands.mid = sma(prices, window);
    bands.upper.assign(prices.size(), kNaN);
    bands.lower.assign(prices.size(), kNaN);
    for (std::size_t i = window - 1; i < prices.size(); ++i) {
        const auto win = prices.subspan(i + 1 - window, window);
        const double mean = std::accumulate(win.begin(), win.end(), 0.0) / static_cast<double>(window);
        double ss = 0.0;
        for (double p : win) ss += (p - mean) * (p - mean);
        const double offset = k * std::sqrt(ss / static_cast<double>(window));
        bands.upper[i] = bands.mid[i] + offset;
        bands.lower[i] = bands.mid[i] - offset;
    }
    return bands;
}

double log_return_volatility(std::span<const double> prices) {
    if (prices.size() < 3) throw std::invalid_argument("volatility: need at least 2 log returns");
    for (double p : prices) {
        if (!(p > 0.0)) throw std::invalid_argument("volatility: non-positive price");
    }
    const std::size_t n = prices.size() - 1;
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = std::log(prices[i + 1] / prices[i]);
    const double mu = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double x : r) ss += (x - mu) * (x - mu);
    return std::sqrt(ss / static_cast<double>(n - 1));
}

std::vector<double> rolling_volatility(std::span<const double> prices, std::size_t window) {
    if (window < 2) throw std::invalid_argument("rolling_volatility: window must be at least 2");
    require_nonempty(prices, "rolling_volatility");
    std::vector<double> out(prices.size(), kNaN);
    for (std::size_t i = window; i < prices.size(); ++i) {
        out[i] = log_return_volatility(prices.subspan(i - window, window + 1));
    }
    return out;
}

void IndicatorConfig::check() const {
    for (auto w : {sma_window, ema_span, rsi_period, bb_window, vol_window}) {
        if (w < 2) throw std::invalid_argument("indicator windows must be at least 2");
    }
    if (!(bb_k > 0.0)) throw std::invalid_argument("bb_k must be positive");
}

std::size_t IndicatorConfig::warmup() const {
    return std::max({sma_window - 1, rsi_period, bb_window - 1, vol_window});
}

void to_json(nlohmann::json& j, const IndicatorConfig& cfg) {
    j = {{"sma_window", cfg.sma_window}, {"ema_span", cfg.ema_span},
         {"rsi_period", cfg.rsi_period}, {"bb_window", cfg.bb_window},
         {"bb_k", cfg.bb_k},             {"vol_window", cfg.vol_window}};
}

void from_json(const nlohmann::json& j, IndicatorConfig& cfg) {
    IndicatorConfig d;
    cfg.sma_window = j.value("sma_window", d.sma_window);
    cfg.ema_span = j.value("ema_span", d.ema_span);
    cfg.rsi_period = j.value("rsi_period", d.rsi_period);
    cfg.bb_window = j.value("bb_window", d.bb_window);
    cfg.bb_k = j.value("bb_k", d.bb_k);
    cfg.vol_window = j.value("vol_window", d.vol_window);
}

nlohmann::json norm_stats_to_json(const NormStats& stats) {
    auto j = nlohmann::json::object();
    for (const auto& [name, s] : stats) j[name] = {{"mean", s.mean}, {"std", s.std}};
    return j;
}

NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats stats;
    for (const auto& [name, s] : j.items()) {
        stats[name] = ColumnStats{s.at("mean").get<double>(), s.at("std").get<double>()};
    }
    return stats;
}

const std::vector<double>& FeatureFrame::column(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::out_of_range("no feature column '" + name + "'");
    return columns[static_cast<std::size_t>(it - names.begin())];
}

FeatureFrame compute_features(const BarSeries& series, const IndicatorConfig& cfg) {
    cfg.check();
    const std::size_t warmup = cfg.warmup();
    if (series.size() <= warmup) {
        throw DataError("series of " + std::to_string(series.size()) +
                        " bars is shorter than the indicator warm-up of " + std::to_string(warmup));
    }
    const auto close = series.closes();
    auto bands = bollinger(close, cfg.bb_window, cfg.bb_k);
    std::vector<std::vector<double>> full{close,
                                          sma(close, cfg.sma_window),
                                          ema(close, cfg.ema_span),
                                          rsi(close, cfg.rsi_period),
                                          std::move(bands.mid),
                                          std::move(bands.upper),
                                          std::move(bands.lower),
                                          rolling_volatility(close, cfg.vol_window)};

    FeatureFrame frame;
    frame.names = feature_names();
    frame.warmup_dropped = warmup;
    for (std::size_t i = warmup; i < series.size(); ++i) frame.timestamps.push_back(series.bars[i].timestamp);
    for (auto& col : full) {
        col.erase(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(warmup));
        frame.columns.push_back(std::move(col));
    }
    return frame;
}

NormStats column_stats(const FeatureFrame& frame) {
    if (frame.rows() == 0) throw DataError("cannot compute statistics of an empty frame");
    NormStats stats;
    const double n = static_cast<double>(frame.rows());
    for (std::size_t c = 0; c < frame.cols(); ++c) {
        const auto& col = frame.columns[c];
        const double mean = std::accumulate(col.begin(), col.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : col) ss += (v - mean) * (v - mean);
        stats[frame.names[c]] = ColumnStats{mean, std::sqrt(ss / n)};
    }
    return stats;
}

namespace {

// Spreads below this fraction of the column scale are rounding noise from a
// constant column.
bool degenerate(const ColumnStats& s) {
    return !(s.std > 1e-12 * std::max(1.0, std::abs(s.mean)));
}

}  // namespace

FeatureFrame normalize(const FeatureFrame& raw, const NormStats& stats) {
    if (raw.normalized) throw std::invalid_argument("normalize: frame is already normalized");
    FeatureFrame out = raw;
    out.norm_stats.clear();
    for (std::size_t c = 0; c < out.cols(); ++c) {
        auto it = stats.find(out.names[c]);
        if (it == stats.end()) throw DataError("no normalization statistics for column '" + out.names[c] + "'");
        const auto s = it->second;
        for (double& v : out.columns[c]) v = degenerate(s) ? 0.0 : (v - s.mean) / s.std;
        out.norm_stats[out.names[c]] = s;
    }
    out.normalized = true;
    return out;
}

FeatureFrame denormalize(const FeatureFrame& frame) {
    if (!frame.normalized) return frame;
    FeatureFrame out = frame;
    for (std::size_t c = 0; c < out.cols(); ++c) {
        const auto s = out.norm_stats.at(out.names[c]);
        for (double& v : out.columns[c]) v = degenerate(s) ? s.mean : v * s.std + s.mean;
    }
    out.normalized = false;
    return out;
}

FeatureFrame build_feature_frame(const BarSeries& series,
                                 const IndicatorConfig& cfg,
                                 const std::optional<NormStats>& norm_source) {
    auto raw = compute_features(series, cfg);
    const NormStats stats = norm_source ? *norm_source : column_stats(raw);
    return normalize(raw, stats);
}

void write_feature_csv(std::ostream& sink, const FeatureFrame& frame) {
    std::string out = "timestamp";
    for (const auto& name : frame.names) out += ',' + name;
    out += '\n';
    for (std::size_t r = 0; r < frame.rows(); ++r) {
        out += std::to_string(frame.timestamps[r]);
        for (const auto& col : frame.columns) {
            out += ',';
            append_number(out, col[r]);
        }
        out += '\n';
    }
    sink << out;
}

FeatureFrame parse_feature_csv(std::istream& source) {
    std::string line;
    if (!std::getline(source, line)) throw DataError("missing header row", 1);
    const auto header = split_fields(line);
    if (header.empty() || header[0] != "timestamp") throw DataError("first column must be 'timestamp'", 1);
    FeatureFrame frame;
    for (std::size_t c = 1; c < header.size(); ++c) frame.names.emplace_back(header[c]);
    frame.columns.resize(frame.names.size());
    std::size_t line_no = 1;
    while (std::getline(source, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != header.size()) {
            throw DataError("expected " + std::to_string(header.size()) + " fields, found " +
                                std::to_string(fields.size()) + " at line " + std::to_string(line_no),
                            line_no);
        }
        const auto ts = parse_number<std::int64_t>(fields[0], "timestamp", line_no);
        if (!frame.timestamps.empty() && ts <= frame.timestamps.back()) {
            throw DataError("non-monotonic timestamp at line " + std::to_string(line_no), line_no);
        }
        frame.timestamps.push_back(ts);
        for (std::size_t c = 1; c < fields.size(); ++c) {
            frame.columns[c - 1].push_back(parse_number<double>(fields[c], header[c], line_no));
        }
    }
    return frame;
}

FeatureFrame read_feature_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    return parse_feature_csv(in);
}

}  // namespace surgecast
