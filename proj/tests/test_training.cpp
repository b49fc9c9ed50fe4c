#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "support.hpp"
#include "surgecast/evaluation.hpp"
#include "surgecast/synthesis.hpp"
#include "surgecast/training.hpp"

using namespace surgecast;

namespace {

/// Non-overlapping windows of a synthetic GBM path. Every third window ends in
/// a sharp ramp; the rest are plain noise.
WindowSet separable_windows(std::size_t count, std::size_t length, std::uint64_t seed) {
    SynthConfig sc;
    sc.n_bars = count * length;
    sc.volatility = 0.001;
    sc.surge_count = 0;
    sc.seed = seed;
    auto closes = generate_gbm(sc).closes();
    Dataset d;
    d.frame.names = {"close", "log_return"};
    d.frame.columns.assign(2, {});
    for (std::size_t w = 0; w < count; ++w) {
        const bool up = w % 3 == 0;
        double lift = 1.0;
        for (std::size_t t = 0; t < length; ++t) {
            const std::size_t i = (w * length) + t;
            if (up && t + 6 >= length) lift *= 1.01;
            closes[i] *= lift;
            d.frame.timestamps.push_back(static_cast<std::int64_t>(i) * 300);
            d.labels.push_back(up && t + 1 == length ? 1 : 0);
            const double prev = t == 0 ? closes[i] : closes[i - 1];
            d.frame.columns[0].push_back((closes[i] / closes[w * length]) - 1.0);
            d.frame.columns[1].push_back(std::log(closes[i] / prev));
        }
    }
    for (auto& col : d.frame.columns) {
        double m = 0;
        for (double v : col) m += v;
        m /= static_cast<double>(col.size());
        double s = 0;
        for (double v : col) s += (v - m) * (v - m);
        s = std::sqrt(s / static_cast<double>(col.size()));
        for (double& v : col) v = (v - m) / s;
    }
    return make_windows(d, length, length);
}

ModelConfig small_model(Arch arch, std::size_t window) {
    ModelConfig c;
    c.arch = arch;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.ff_dim = 32;
    c.prompt_tokens = 4;
    c.window = window;
    c.n_features = 2;
    return c;
}

TrainConfig quick_train(std::size_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 16;
    t.adam.lr = 3e-3;
    t.seed = 5;
    return t;
}

std::vector<float> probe_logits(const Model<float>& m) {
    surgecast::Rng rng(77);
    std::vector<float> x(3 * m.config.window * m.config.n_features);
    for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
    return forward(m, Tensor<float>::from({3, m.config.window, m.config.n_features}, x)).to_vector();
}

bool same_params(const ParameterSet<float>& a, const ParameterSet<float>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.items()[i].name != b.items()[i].name) return false;
        if (a.items()[i].tensor.shape() != b.items()[i].tensor.shape()) return false;
        if (a.items()[i].tensor.to_vector() != b.items()[i].tensor.to_vector()) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("class weights") {
    const std::vector<int> even{0, 1, 0, 1};
    CHECK(compute_class_weights(even, ClassWeightMode::Balanced) == std::array<double, 2>{1.0, 1.0});
    std::vector<int> skewed(90, 0);
    skewed.insert(skewed.end(), 10, 1);
    const auto w = compute_class_weights(skewed, ClassWeightMode::Balanced);
    CHECK(w[0] == doctest::Approx(100.0 / 180.0).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(w[0] * 90 == doctest::Approx(w[1] * 10).epsilon(1e-15));
    CHECK(compute_class_weights(skewed, ClassWeightMode::None) == std::array<double, 2>{1.0, 1.0});
    CHECK_THROWS_AS(compute_class_weights(std::vector<int>(5, 0), ClassWeightMode::Balanced), std::invalid_argument);
    CHECK(parse_class_weight_mode("none") == ClassWeightMode::None);
    CHECK_THROWS(parse_class_weight_mode("focal"));
}

TEST_CASE("train config json") {
    auto t = quick_train(3);
    t.class_weights = ClassWeightMode::None;
    nlohmann::json j = t;
    const auto back = j.get<TrainConfig>();
    CHECK(back.epochs == 3);
    CHECK(back.adam.lr == t.adam.lr);
    CHECK(back.class_weights == ClassWeightMode::None);
    t.batch_size = 0;
    CHECK_THROWS_AS(t.check(), std::invalid_argument);
}

TEST_CASE("zero epochs leave the initialization untouched") {
    const auto windows = separable_windows(30, 12, 1);
    const auto cfg = small_model(Arch::Conv, 12);
    const auto tc = quick_train(0);
    const auto ck = train(cfg, windows, nullptr, tc);
    CHECK(ck.history.empty());
    CHECK(ck.adam.t == 0);
    CHECK(same_params(ck.model.params, init_model<float>(cfg, Rng::derive(tc.seed, "init")).params));
}

TEST_CASE("separable data: loss falls, class 1 is learned, test rows untouched") {
    const auto windows = separable_windows(150, 16, 2);
    const auto validation = separable_windows(30, 16, 3);
    const auto held_out = separable_windows(30, 16, 4);
    const auto cfg = small_model(Arch::Conv, 16);
    auto tc = quick_train(12);
    tc.eval_every = 4;
    const auto ck = train(cfg, windows, &validation, tc);

    REQUIRE(ck.history.size() == 12);
    for (std::size_t e = 1; e < 5; ++e) CHECK(ck.history[e].train_loss < ck.history[e - 1].train_loss);
    for (const auto& h : ck.history) CHECK(h.validation.has_value() == (h.epoch % 4 == 0));
    const auto report = classification_report(ck.model, windows);
    CHECK(report.per_class[1].f1 >= 0.9);
    CHECK(held_out.reads() == 0);
    CHECK(windows.reads() == (12 * windows.size()) + windows.size());
    CHECK(validation.reads() == 3 * validation.size());
}

TEST_CASE("training is deterministic for a seed") {
    const auto windows = separable_windows(40, 12, 5);
    for (Arch arch : {Arch::Simple, Arch::BreakGPT}) {
        const auto cfg = small_model(arch, 12);
        const auto a = train(cfg, windows, &windows, quick_train(2));
        const auto b = train(cfg, windows, &windows, quick_train(2));
        CHECK(same_params(a.model.params, b.model.params));
        CHECK(a.adam.m == b.adam.m);
        std::ostringstream ha;
        std::ostringstream hb;
        write_history_jsonl(ha, a.history);
        write_history_jsonl(hb, b.history);
        CHECK(ha.str() == hb.str());
        auto other = quick_train(2);
        other.seed = 6;
        CHECK_FALSE(same_params(a.model.params, train(cfg, windows, nullptr, other).model.params));
    }
}

TEST_CASE("non-finite inputs abort with diagnostics") {
    Dataset d;
    d.frame.names = {"a", "b"};
    d.frame.columns.assign(2, std::vector<double>(40, 0.5));
    d.frame.columns[0][7] = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < 40; ++i) {
        d.frame.timestamps.push_back(static_cast<std::int64_t>(i));
        d.labels.push_back(static_cast<int>(i % 2));
    }
    const auto windows = make_windows(d, 8);
    try {
        train(small_model(Arch::Simple, 8), windows, nullptr, quick_train(1));
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("epoch 1") != std::string::npos);
        CHECK(msg.find("input.weight") != std::string::npos);
    }
}

TEST_CASE("history jsonl has one record per epoch") {
    std::vector<HistoryEntry> h{{1, 0.5, std::nullopt}, {2, 0.25, make_report({3, 1, 5, 1}, 0.5, "conv")}};
    std::ostringstream out;
    write_history_jsonl(out, h);
    std::istringstream in(out.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto back = nlohmann::json::parse(line).get<HistoryEntry>();
        CHECK(back.epoch == h[n].epoch);
        CHECK(back.train_loss == h[n].train_loss);
        CHECK(back.validation.has_value() == h[n].validation.has_value());
        ++n;
    }
    CHECK(n == 2);
}

TEST_CASE("checkpoint: round trip preserves logits exactly") {
    const auto windows = separable_windows(30, 12, 6);
    for (Arch arch : {Arch::Simple, Arch::Conv, Arch::BreakGPT}) {
        const auto ck = train(small_model(arch, 12), windows, &windows, quick_train(1));
        std::stringstream buf;
        save_checkpoint(ck, buf);
        const auto back = load_checkpoint(buf);
        CHECK(back.model.config == ck.model.config);
        CHECK(back.model.prompt_text == ck.model.prompt_text);
        CHECK(same_params(back.model.params, ck.model.params));
        CHECK(back.adam.t == ck.adam.t);
        CHECK(back.adam.m == ck.adam.m);
        CHECK(back.adam.v == ck.adam.v);
        CHECK(back.epoch == 1);
        CHECK(back.history.size() == 1);
        CHECK(probe_logits(back.model) == probe_logits(ck.model));
        CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));
    }
}

TEST_CASE("checkpoint: corruption gives typed errors") {
    const auto ck = train(small_model(Arch::Conv, 12), separable_windows(30, 12, 7), nullptr, quick_train(1));
    const auto bytes = serialize_checkpoint(ck);
    auto kind_of = [](std::vector<std::uint8_t> b) {
        try {
            deserialize_checkpoint(b);
        } catch (const CheckpointError& e) {
            return static_cast<int>(e.kind());
        }
        return -1;
    };
    auto magic = bytes;
    magic[0] = 'X';
    CHECK(kind_of(magic) == static_cast<int>(CheckpointError::Kind::MagicMismatch));
    auto version = bytes;
    version[4] = 9;
    CHECK(kind_of(version) == static_cast<int>(CheckpointError::Kind::UnsupportedVersion));
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    CHECK(kind_of(flipped) == static_cast<int>(CheckpointError::Kind::ChecksumMismatch));
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK(kind_of(trailing) != -1);

    surgecast::Rng rng(8);
    for (int i = 0; i < 25; ++i) {
        const auto cut = static_cast<std::size_t>(rng.below(bytes.size()));
        const std::vector<std::uint8_t> head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        const int kind = kind_of(head);
        CHECK((kind == static_cast<int>(CheckpointError::Kind::Truncated) ||
               kind == static_cast<int>(CheckpointError::Kind::MagicMismatch)));
    }
    CHECK_THROWS_AS(load_checkpoint(std::string("/nonexistent/file.srgc")), std::exception);
}
