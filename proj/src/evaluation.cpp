#include "surgecast/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace surgecast {

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) {
        throw std::invalid_argument("confusion: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw std::invalid_argument("confusion: no predictions");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] == 1;
        const bool y = labels[i] == 1;
        if (p && y) ++cm.tp;
        else if (p) ++cm.fp;
        else if (y) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double round6(double v) { return std::round(v * 1e6) / 1e6; }

}  // namespace

double f1_score(double precision, double recall) {
    const double s = precision + recall;
    return s == 0.0 ? 0.0 : 2.0 * precision * recall / s;
}

ClassScores precision_recall_f1(const ConfusionMatrix& cm, int positive_class) {
    if (positive_class != 0 && positive_class != 1) throw std::invalid_argument("positive_class must be 0 or 1");
    const std::size_t tp = positive_class == 1 ? cm.tp : cm.tn;
    const std::size_t fp = positive_class == 1 ? cm.fp : cm.fn;
    const std::size_t fn = positive_class == 1 ? cm.fn : cm.fp;
    ClassScores s;
    s.precision = ratio(tp, tp + fp);
    s.recall = ratio(tp, tp + fn);
    s.f1 = f1_score(s.precision, s.recall);
    return s;
}

double macro_f1(const MetricsReport& report) {
    return (report.per_class[0].f1 + report.per_class[1].f1) / 2.0;
}

MetricsReport make_report(const ConfusionMatrix& cm, double threshold, std::string model) {
    MetricsReport r;
    r.model = std::move(model);
    r.threshold = threshold;
    r.confusion = cm;
    r.accuracy = ratio(cm.tp + cm.tn, cm.total());
    for (int c = 0; c < 2; ++c) {
        const auto s = precision_recall_f1(cm, c);
        auto& out = r.per_class[static_cast<std::size_t>(c)];
        out.precision = s.precision;
        out.recall = s.recall;
        out.f1 = s.f1;
        out.support = c == 1 ? cm.tp + cm.fn : cm.tn + cm.fp;
    }
    r.macro_f1 = macro_f1(r);
    return r;
}

void to_json(nlohmann::json& j, const MetricsReport& report) {
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t c = 0; c < 2; ++c) {
        const auto& m = report.per_class[c];
        per_class[kClassNames[c]] = {{"precision", round6(m.precision)},
                                     {"recall", round6(m.recall)},
                                     {"f1", round6(m.f1)},
                                     {"support", m.support}};
    }
    j = {{"model", report.model},
         {"threshold", round6(report.threshold)},
         {"accuracy", round6(report.accuracy)},
         // Mean of the stored per-class values so the identity survives rounding.
         {"macro_f1", (round6(report.per_class[0].f1) + round6(report.per_class[1].f1)) / 2.0},
         {"per_class", per_class},
         {"confusion",
          {{"tp", report.confusion.tp}, {"fp", report.confusion.fp}, {"tn", report.confusion.tn}, {"fn", report.confusion.fn}}}};
}

void from_json(const nlohmann::json& j, MetricsReport& report) {
    report.model = j.at("model").get<std::string>();
    report.threshold = j.at("threshold").get<double>();
    report.accuracy = j.at("accuracy").get<double>();
    report.macro_f1 = j.at("macro_f1").get<double>();
    for (std::size_t c = 0; c < 2; ++c) {
        const auto& m = j.at("per_class").at(kClassNames[c]);
        report.per_class[c] = {m.at("precision").get<double>(), m.at("recall").get<double>(), m.at("f1").get<double>(),
                               m.at("support").get<std::size_t>()};
    }
    const auto& cm = j.at("confusion");
    report.confusion = {cm.at("tp").get<std::size_t>(), cm.at("fp").get<std::size_t>(), cm.at("tn").get<std::size_t>(),
                        cm.at("fn").get<std::size_t>()};
}

std::vector<int> predict_classes(std::span<const double> p1, double threshold) {
    std::vector<int> out(p1.size());
    std::transform(p1.begin(), p1.end(), out.begin(), [threshold](double p) { return p > threshold ? 1 : 0; });
    return out;
}

MetricsReport report_from_probabilities(std::span<const double> p1,
                                        std::span<const int> labels,
                                        double threshold,
                                        std::string model) {
    const auto preds = predict_classes(p1, threshold);
    return make_report(confusion(preds, labels), threshold, std::move(model));
}

std::vector<double> predict_probabilities(const Model<float>& model, const WindowSet& windows, std::size_t batch_size) {
    const auto& cfg = model.config;
    if (windows.length() != cfg.window || windows.features() != cfg.n_features) {
        throw ShapeError("windows of " + std::to_string(windows.length()) + " x " + std::to_string(windows.features()) +
                         " do not match the model's " + std::to_string(cfg.window) + " x " +
                         std::to_string(cfg.n_features));
    }
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    std::vector<double> out(windows.size());
    std::vector<std::size_t> ids;
    for (std::size_t start = 0; start < windows.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, windows.size() - start);
        ids.resize(n);
        std::iota(ids.begin(), ids.end(), start);
        auto x = Tensor<float>::zeros({n, cfg.window, cfg.n_features});
        windows.fill<float>(ids, x.mutable_data());
        const auto out_t = forward(model, x);
        const auto logits = out_t.data();
        for (std::size_t i = 0; i < n; ++i) {
            // softmax(z)[1] = sigmoid(z1 - z0)
            const double d = static_cast<double>(logits[(2 * i) + 1]) - static_cast<double>(logits[2 * i]);
            out[start + i] = 1.0 / (1.0 + std::exp(-d));
        }
    }
    return out;
}

MetricsReport classification_report(const Model<float>& model, const WindowSet& windows, double threshold) {
    const auto p1 = predict_probabilities(model, windows);
    return report_from_probabilities(p1, windows.labels(), threshold, to_string(model.config.arch));
}

std::vector<SweepRow> threshold_sweep(std::span<const double> p1,
                                      std::span<const int> labels,
                                      std::span<const double> thresholds) {
    std::vector<SweepRow> rows;
    for (double t : thresholds) {
        const auto cm = confusion(predict_classes(p1, t), labels);
        const auto s = precision_recall_f1(cm, 1);
        rows.push_back({t, s.precision, s.recall, s.f1});
    }
    return rows;
}

std::vector<double> parse_sweep(const std::string& spec) {
    auto bad = [&] { return std::invalid_argument("sweep '" + spec + "' is not lo..hi or lo..hi:step"); };
    const auto dots = spec.find("..");
    if (dots == std::string::npos) throw bad();
    const auto colon = spec.find(':', dots);
    auto num = [&](std::size_t from, std::size_t to) {
        double v = 0.0;
        const char* first = spec.data() + from;
        const char* last = spec.data() + to;
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) throw bad();
        return v;
    };
    const double lo = num(0, dots);
    const double hi = num(dots + 2, colon == std::string::npos ? spec.size() : colon);
    const double step = colon == std::string::npos ? 0.05 : num(colon + 1, spec.size());
    if (!(step > 0.0) || !(lo <= hi)) throw bad();
    std::vector<double> out;
    const auto n = static_cast<std::size_t>(std::floor(((hi - lo) / step) + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9);
    return out;
}

void write_sweep_csv(std::ostream& sink, std::span<const SweepRow> rows) {
    sink << "threshold,precision1,recall1,f1_1\n";
    char buf[64];
    auto put = [&](double v, char end) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, round6(v));
        sink.write(buf, ptr - buf);
        sink.put(end);
    };
    for (const auto& r : rows) {
        put(r.threshold, ',');
        put(r.precision1, ',');
        put(r.recall1, ',');
        put(r.f1_1, '\n');
    }
}

}  // namespace surgecast
