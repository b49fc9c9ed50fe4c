#include "surgecast/labeling.hpp"

#include <charconv>
#include <deque>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace surgecast {

namespace {

// out[j] = best of values[j .. j+width-1] under `better`, monotonic deque.
template <typename Better>
std::vector<double> sliding_extreme(std::span<const double> values, std::size_t width, Better better) {
    std::vector<double> out;
    if (values.size() < width) return out;
    out.reserve(values.size() - width + 1);
    std::deque<std::size_t> q;
    for (std::size_t i = 0; i < values.size(); ++i) {
        while (!q.empty() && !better(values[q.back()], values[i])) q.pop_back();
        q.push_back(i);
        if (q.front() + width <= i) q.pop_front();
        if (i + 1 >= width) out.push_back(values[q.front()]);
    }
    return out;
}

}  // namespace

std::string to_string(SwingKind kind) {
    switch (kind) {
        case SwingKind::HH: return "HH";
        case SwingKind::LL: return "LL";
        case SwingKind::HL: return "HL";
        case SwingKind::LH: return "LH";
    }
    return "?";
}

void LabelingConfig::check() const {
    if (extrema_window < 3 || extrema_window % 2 == 0) {
        throw std::invalid_argument("extrema_window must be odd and at least 3");
    }
    if (confirmations < 1) throw std::invalid_argument("confirmations must be at least 1");
    if (!(uptrend_threshold > 0.0)) throw std::invalid_argument("uptrend_threshold must be positive");
}

void to_json(nlohmann::json& j, const LabelingConfig& cfg) {
    j = {{"extrema_window", cfg.extrema_window},
         {"confirmations", cfg.confirmations},
         {"uptrend_threshold", cfg.uptrend_threshold}};
}

void from_json(const nlohmann::json& j, LabelingConfig& cfg) {
    LabelingConfig d;
    cfg.extrema_window = j.value("extrema_window", d.extrema_window);
    cfg.confirmations = j.value("confirmations", d.confirmations);
    cfg.uptrend_threshold = j.value("uptrend_threshold", d.uptrend_threshold);
}

std::vector<ExtremumPoint> find_local_extrema(std::span<const double> prices, std::size_t window) {
    if (window < 3 || window % 2 == 0) throw std::invalid_argument("extrema window must be odd and at least 3");
    std::vector<ExtremumPoint> out;
    const std::size_t half = window / 2;
    if (prices.size() < window) return out;

    // Half-windows left and right of i are [i-half, i) and (i, i+half], both of
    // width `half`.
    const auto hi = sliding_extreme(prices, half, [](double a, double b) { return a > b; });
    const auto lo = sliding_extreme(prices, half, [](double a, double b) { return a < b; });
    for (std::size_t i = half; i + half < prices.size(); ++i) {
        const double p = prices[i];
        if (p > hi[i - half] && p > hi[i + 1]) {
            out.push_back({i, p, ExtremumKind::LocalMax});
        } else if (p < lo[i - half] && p < lo[i + 1]) {
            out.push_back({i, p, ExtremumKind::LocalMin});
        }
    }
    return out;
}

std::vector<SwingEvent> classify_swings(std::span<const ExtremumPoint> extrema, std::size_t k) {
    if (k == 0) throw std::invalid_argument("classify_swings: K must be positive");
    std::vector<SwingEvent> events;
    std::vector<const ExtremumPoint*> maxima;
    std::vector<const ExtremumPoint*> minima;
    for (std::size_t e = 0; e < extrema.size(); ++e) {
        const auto& point = extrema[e];
        if (e > 0 && point.index <= extrema[e - 1].index) {
            throw std::invalid_argument("classify_swings: extrema not index-ordered");
        }

        auto& history = point.kind == ExtremumKind::LocalMax ? maxima : minima;
        if (history.size() >= k) {
            const auto chain_begin = history.end() - static_cast<std::ptrdiff_t>(k);
            bool rising = true;
            bool falling = true;
            double prev = (*chain_begin)->price;
            for (auto it = chain_begin + 1; it != history.end(); ++it) {
                rising = rising && (*it)->price > prev;
                falling = falling && (*it)->price < prev;
                prev = (*it)->price;
            }
            rising = rising && point.price > prev;
            falling = falling && point.price < prev;

            if (rising || falling) {
                SwingEvent ev;
                ev.index = point.index;
                if (point.kind == ExtremumKind::LocalMax) {
                    ev.kind = rising ? SwingKind::HH : SwingKind::LH;
                } else {
                    ev.kind = rising ? SwingKind::HL : SwingKind::LL;
                }
                const double start = (*chain_begin)->price;
                ev.delta_p = (point.price - start) / start;
                for (auto it = chain_begin; it != history.end(); ++it) ev.confirmed_by.push_back((*it)->index);
                events.push_back(std::move(ev));
            }
        }
        history.push_back(&point);
    }
    return events;
}

TargetSeries uptrend_targets(std::span<const double> prices,
                             std::span<const SwingEvent> events,
                             double threshold) {
    TargetSeries out;
    out.labels.assign(prices.size(), 0);
    for (const auto& ev : events) {
        if (ev.index >= prices.size()) throw std::out_of_range("uptrend_targets: event index out of range");
        if (ev.kind == SwingKind::HH && ev.delta_p > threshold && out.labels[ev.index] == 0) {
            out.labels[ev.index] = 1;
            ++out.positive_count;
        }
    }
    out.events.assign(events.begin(), events.end());
    return out;
}

TargetSeries label_series(std::span<const double> prices, const LabelingConfig& cfg) {
    cfg.check();
    const auto extrema = find_local_extrema(prices, cfg.extrema_window);
    const auto events = classify_swings(extrema, cfg.confirmations);
    return uptrend_targets(prices, events, cfg.uptrend_threshold);
}

void write_labels_csv(std::ostream& sink,
                      std::span<const std::int64_t> timestamps,
                      const TargetSeries& targets) {
    if (timestamps.size() != targets.labels.size()) {
        throw std::invalid_argument("write_labels_csv: timestamps and labels differ in length");
    }
    std::vector<const SwingEvent*> at(targets.labels.size(), nullptr);
    for (const auto& ev : targets.events) at.at(ev.index) = &ev;

    std::ostringstream out;
    out.precision(9);
    out << "timestamp,label,event_kind,delta_p\n";
    for (std::size_t i = 0; i < timestamps.size(); ++i) {
        out << timestamps[i] << ',' << targets.labels[i] << ',';
        if (at[i] != nullptr) out << to_string(at[i]->kind) << ',' << at[i]->delta_p;
        else out << ',';
        out << '\n';
    }
    sink << out.str();
}

std::vector<LabelRow> parse_labels_csv(std::istream& source) {
    std::string line;
    if (!std::getline(source, line) || line.rfind("timestamp,label", 0) != 0) {
        throw DataError("labels file must start with a 'timestamp,label' header", 1);
    }
    std::vector<LabelRow> rows;
    std::size_t line_no = 1;
    while (std::getline(source, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto c1 = line.find(',');
        const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        LabelRow row;
        const char* end1 = line.data() + (c1 == std::string::npos ? line.size() : c1);
        const char* end2 = line.data() + (c2 == std::string::npos ? line.size() : c2);
        auto r1 = std::from_chars(line.data(), end1, row.timestamp);
        bool ok = c1 != std::string::npos && r1.ec == std::errc{} && r1.ptr == end1;
        if (ok) {
            auto r2 = std::from_chars(end1 + 1, end2, row.label);
            ok = r2.ec == std::errc{} && r2.ptr == end2 && (row.label == 0 || row.label == 1);
        }
        if (!ok) throw DataError("malformed label row at line " + std::to_string(line_no), line_no);
        rows.push_back(row);
    }
    return rows;
}

std::vector<LabelRow> read_labels_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    return parse_labels_csv(in);
}

Dataset join_labels(const FeatureFrame& frame, std::span<const LabelRow> rows) {
    Dataset out;
    out.frame = frame;
    out.labels.reserve(frame.rows());
    std::size_t j = 0;
    for (std::int64_t ts : frame.timestamps) {
        while (j < rows.size() && rows[j].timestamp < ts) ++j;
        if (j == rows.size() || rows[j].timestamp != ts) {
            throw DataError("no label for feature row at timestamp " + std::to_string(ts));
        }
        out.labels.push_back(rows[j].label);
    }
    return out;
}

Dataset attach_labels(const FeatureFrame& frame, const TargetSeries& targets) {
    if (targets.labels.size() != frame.rows() + frame.warmup_dropped) {
        throw std::invalid_argument("attach_labels: targets do not cover the frame's source bars");
    }
    Dataset out;
    out.frame = frame;
    out.labels.assign(targets.labels.begin() + static_cast<std::ptrdiff_t>(frame.warmup_dropped),
                      targets.labels.end());
    return out;
}

namespace {

FeatureFrame slice_rows(const FeatureFrame& frame, std::size_t begin, std::size_t end) {
    FeatureFrame out;
    out.names = frame.names;
    out.norm_stats = frame.norm_stats;
    out.normalized = frame.normalized;
    out.warmup_dropped = frame.warmup_dropped + begin;
    out.timestamps.assign(frame.timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                          frame.timestamps.begin() + static_cast<std::ptrdiff_t>(end));
    for (const auto& col : frame.columns) {
        out.columns.emplace_back(col.begin() + static_cast<std::ptrdiff_t>(begin),
                                 col.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

}  // namespace

std::pair<Dataset, Dataset> split_chronological(const FeatureFrame& frame,
                                                const TargetSeries& targets,
                                                std::int64_t cutoff) {
    const Dataset all = attach_labels(denormalize(frame), targets);
    if (all.rows() == 0) throw std::invalid_argument("split_chronological: empty frame");
    if (cutoff <= all.frame.timestamps.front() || cutoff > all.frame.timestamps.back()) {
        throw std::invalid_argument("split_chronological: cutoff " + std::to_string(cutoff) +
                                    " leaves one side empty (range " +
                                    std::to_string(all.frame.timestamps.front()) + ".." +
                                    std::to_string(all.frame.timestamps.back()) + ")");
    }
    std::size_t split = 0;
    while (split < all.rows() && all.frame.timestamps[split] < cutoff) ++split;

    auto train_raw = slice_rows(all.frame, 0, split);
    auto test_raw = slice_rows(all.frame, split, all.rows());
    const auto stats = column_stats(train_raw);

    Dataset train{normalize(train_raw, stats), {all.labels.begin(), all.labels.begin() + static_cast<std::ptrdiff_t>(split)}};
    Dataset test{normalize(test_raw, stats), {all.labels.begin() + static_cast<std::ptrdiff_t>(split), all.labels.end()}};
    return {std::move(train), std::move(test)};
}

std::pair<Dataset, Dataset> split_tail(const Dataset& data, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_tail: fraction must be in (0, 1)");
    const auto tail = static_cast<std::size_t>(static_cast<double>(data.rows()) * fraction);
    if (tail == 0 || tail >= data.rows()) throw std::invalid_argument("split_tail: a side would be empty");
    const std::size_t split = data.rows() - tail;
    Dataset head{slice_rows(data.frame, 0, split), {data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(split)}};
    Dataset rest{slice_rows(data.frame, split, data.rows()), {data.labels.begin() + static_cast<std::ptrdiff_t>(split), data.labels.end()}};
    return {std::move(head), std::move(rest)};
}

WindowSet::WindowSet(const Dataset& data, std::size_t length, std::size_t stride)
    : length_(length), stride_(stride), features_(data.frame.cols()) {
    if (length == 0 || stride == 0) throw std::invalid_argument("make_windows: length and stride must be positive");
    if (data.labels.size() != data.rows()) throw std::invalid_argument("make_windows: labels do not match frame rows");
    const std::size_t n = data.rows();
    if (length > n) {
        throw std::invalid_argument("make_windows: window length " + std::to_string(length) +
                                    " exceeds " + std::to_string(n) + " rows");
    }
    rows_.resize(n * features_);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < features_; ++c) rows_[(r * features_) + c] = data.frame.columns[c][r];
    }
    timestamps_ = data.frame.timestamps;
    const std::size_t count = ((n - length) / stride) + 1;
    labels_.reserve(count);
    for (std::size_t k = 0; k < count; ++k) labels_.push_back(data.labels[end_row(k)]);
}

std::vector<double> WindowSet::window(std::size_t k) const {
    if (k >= size()) throw std::out_of_range("WindowSet::window");
    const std::size_t begin = k * stride_ * features_;
    reads_->fetch_add(1, std::memory_order_relaxed);
    return {rows_.begin() + static_cast<std::ptrdiff_t>(begin),
            rows_.begin() + static_cast<std::ptrdiff_t>(begin + (length_ * features_))};
}

WindowSet make_windows(const Dataset& data, std::size_t length, std::size_t stride) {
    return WindowSet(data, length, stride);
}

}  // namespace surgecast
