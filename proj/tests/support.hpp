#pragma once

// Independent reference implementations and shared fixtures for the tests.
// Oracles here are deliberately naive: direct scans, long double, no reuse of
// library internals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "surgecast/gradcheck.hpp"
#include "surgecast/labeling.hpp"
#include "surgecast/market_data.hpp"
#include "surgecast/models.hpp"
#include "surgecast/random.hpp"
#include "surgecast/tensor.hpp"

namespace testing {

using namespace surgecast;

inline std::vector<double> random_walk(std::uint64_t seed, std::size_t n, double start = 100.0, double sigma = 0.002) {
    Rng rng(seed);
    std::vector<double> p(n);
    double lp = std::log(start);
    for (auto& x : p) {
        x = std::exp(lp);
        lp += sigma * rng.normal();
    }
    return p;
}

inline BarSeries bars_from_closes(std::span<const double> closes, std::int64_t t0 = 1706745600, std::int64_t step = 60) {
    BarSeries s;
    s.interval_seconds = step;
    double prev = closes.empty() ? 0.0 : closes[0];
    for (std::size_t i = 0; i < closes.size(); ++i) {
        OhlcBar b;
        b.timestamp = t0 + (static_cast<std::int64_t>(i) * step);
        b.open = prev;
        b.close = closes[i];
        b.high = std::max(b.open, b.close) * 1.0005;
        b.low = std::min(b.open, b.close) * 0.9995;
        b.volume = 1.0 + static_cast<double>(i % 7);
        s.bars.push_back(b);
        prev = closes[i];
    }
    return s;
}

// ---------------------------------------------------------------- labeling

/// Every bar compared against every other bar of its centered window.
inline std::vector<ExtremumPoint> brute_extrema(std::span<const double> p, std::size_t window) {
    std::vector<ExtremumPoint> out;
    const std::size_t h = window / 2;
    for (std::size_t i = h; i + h < p.size(); ++i) {
        bool is_max = true;
        bool is_min = true;
        for (std::size_t j = i - h; j <= i + h; ++j) {
            if (j == i) continue;
            is_max = is_max && p[i] > p[j];
            is_min = is_min && p[i] < p[j];
        }
        if (is_max) out.push_back({i, p[i], ExtremumKind::LocalMax});
        if (is_min) out.push_back({i, p[i], ExtremumKind::LocalMin});
    }
    return out;
}

/// For each extremum, rescans all earlier extrema for the previous K of its kind.
inline std::vector<SwingEvent> brute_swings(std::span<const ExtremumPoint> ex, std::size_t k) {
    std::vector<SwingEvent> out;
    for (std::size_t e = 0; e < ex.size(); ++e) {
        std::vector<std::size_t> prev;
        for (std::size_t j = e; j-- > 0 && prev.size() < k;) {
            if (ex[j].kind == ex[e].kind) prev.push_back(j);
        }
        if (prev.size() < k) continue;
        std::reverse(prev.begin(), prev.end());
        std::vector<double> chain;
        for (auto j : prev) chain.push_back(ex[j].price);
        chain.push_back(ex[e].price);
        bool up = true;
        bool down = true;
        for (std::size_t i = 1; i < chain.size(); ++i) {
            up = up && chain[i] > chain[i - 1];
            down = down && chain[i] < chain[i - 1];
        }
        if (!up && !down) continue;
        SwingEvent ev;
        ev.index = ex[e].index;
        if (ex[e].kind == ExtremumKind::LocalMax) ev.kind = up ? SwingKind::HH : SwingKind::LH;
        else ev.kind = up ? SwingKind::HL : SwingKind::LL;
        ev.delta_p = (chain.back() - chain.front()) / chain.front();
        for (auto j : prev) ev.confirmed_by.push_back(ex[j].index);
        out.push_back(ev);
    }
    return out;
}

inline std::vector<int> brute_labels(std::span<const double> p, const LabelingConfig& cfg) {
    const auto ex = brute_extrema(p, cfg.extrema_window);
    std::vector<int> labels(p.size(), 0);
    for (const auto& ev : brute_swings(ex, cfg.confirmations)) {
        if (ev.kind == SwingKind::HH && ev.delta_p > cfg.uptrend_threshold) labels[ev.index] = 1;
    }
    return labels;
}

// ---------------------------------------------------------------- indicators

/// Two-pass sample standard deviation of log returns in extended precision.
inline double volatility_oracle(std::span<const double> p) {
    std::vector<long double> r;
    for (std::size_t i = 1; i < p.size(); ++i) {
        r.push_back(std::log(static_cast<long double>(p[i]) / static_cast<long double>(p[i - 1])));
    }
    long double mu = 0.0L;
    for (auto x : r) mu += x;
    mu /= static_cast<long double>(r.size());
    long double ss = 0.0L;
    for (auto x : r) ss += (x - mu) * (x - mu);
    return static_cast<double>(std::sqrt(ss / static_cast<long double>(r.size() - 1)));
}

inline double rel_diff(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// ---------------------------------------------------------------- gradients

inline Tensor<double> random_tensor(Rng& rng, Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(v), grad);
}

/// Values bounded away from zero so kinked ops are differentiable at every
/// probe point.
inline Tensor<double> random_away_from_zero(Rng& rng, Shape shape) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) {
        const double m = rng.uniform(0.05, 1.0);
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return Tensor<double>::from(std::move(shape), std::move(v), true);
}

/// Reduces to a scalar through fixed random weights so every output entry
/// contributes a distinct gradient.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor(rng, y.shape(), false);
    return sum(mul(y, w));
}

inline std::size_t dim_between(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

struct GradCase {
    std::string name;
    std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// One check per differentiable operation on randomized shapes.
inline std::vector<GradCase> op_gradient_cases() {
    using T = Tensor<double>;
    std::vector<GradCase> cases;
    auto unary = [&](std::string name, std::function<T(const T&)> op, bool avoid_zero = false) {
        cases.push_back({std::move(name), [op, avoid_zero](std::uint64_t seed) {
            Rng rng(seed);
            Shape s{dim_between(rng, 1, 3), dim_between(rng, 2, 5), dim_between(rng, 2, 6)};
            auto x = avoid_zero ? random_away_from_zero(rng, s) : random_tensor(rng, s, true, -2.0, 2.0);
            return check_gradients({x}, [&] { return project(op(x), seed + 1); });
        }});
    };
    unary("scale", [](const T& x) { return scale(x, 1.7); });
    unary("transpose", [](const T& x) { return transpose(x); });
    unary("reshape", [](const T& x) { return reshape(x, {x.numel()}); });
    unary("mean_time", [](const T& x) { return mean_time(x); });
    unary("sum", [](const T& x) { return sum(x); });
    unary("mean", [](const T& x) { return mean(x); });
    unary("softmax", [](const T& x) { return softmax(x); });
    unary("silu", [](const T& x) { return silu(x); });
    unary("gelu", [](const T& x) { return gelu(x); });
    unary("relu", [](const T& x) { return relu(x); }, true);
    unary("expand_batch", [](const T& x) { return expand_batch(x, 3); });
    unary("dropout", [](const T& x) {
        Rng masks(99);  // same mask on every evaluation
        return dropout(x, 0.3, masks, true);
    });

    cases.push_back({"add_sub_mul", [](std::uint64_t seed) {
        Rng rng(seed);
        Shape s{dim_between(rng, 1, 3), dim_between(rng, 2, 5), dim_between(rng, 2, 6)};
        auto a = random_tensor(rng, s);
        auto b = random_tensor(rng, s);
        auto c = random_tensor(rng, {s[2]});  // suffix broadcast
        return check_gradients({a, b, c}, [&] { return project(mul(sub(add(a, c), b), add(a, b)), seed + 1); });
    }});
    cases.push_back({"matmul_shared", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto k = dim_between(rng, 1, 6);
        auto a = random_tensor(rng, {dim_between(rng, 1, 3), dim_between(rng, 1, 5), k});
        auto b = random_tensor(rng, {k, dim_between(rng, 1, 6)});
        return check_gradients({a, b}, [&] { return project(matmul(a, b), seed + 1); });
    }});
    cases.push_back({"matmul_batched", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto batch = dim_between(rng, 1, 4);
        const auto k = dim_between(rng, 1, 6);
        auto a = random_tensor(rng, {batch, dim_between(rng, 1, 5), k});
        auto b = random_tensor(rng, {batch, k, dim_between(rng, 1, 6)});
        return check_gradients({a, b}, [&] { return project(matmul(a, b), seed + 1); });
    }});
    cases.push_back({"linear", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto k = dim_between(rng, 1, 6);
        const auto n = dim_between(rng, 1, 6);
        auto x = random_tensor(rng, {dim_between(rng, 1, 3), dim_between(rng, 1, 5), k});
        auto w = random_tensor(rng, {k, n});
        auto b = random_tensor(rng, {n});
        return check_gradients({x, w, b}, [&] { return project(linear(x, w, b), seed + 1); });
    }});
    cases.push_back({"concat_slice_time", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto batch = dim_between(rng, 1, 3);
        const auto d = dim_between(rng, 1, 5);
        const auto la = dim_between(rng, 1, 4);
        const auto lb = dim_between(rng, 1, 4);
        auto a = random_tensor(rng, {batch, la, d});
        auto b = random_tensor(rng, {batch, lb, d});
        const auto start = static_cast<std::size_t>(rng.below(la + lb));
        const auto len = 1 + static_cast<std::size_t>(rng.below(la + lb - start));
        return check_gradients({a, b}, [&] { return project(slice_time(concat_time(a, b), start, len), seed + 1); });
    }});
    cases.push_back({"split_merge_heads", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto heads = dim_between(rng, 1, 3);
        auto x = random_tensor(rng, {dim_between(rng, 1, 3), dim_between(rng, 1, 4), heads * dim_between(rng, 1, 3)});
        Rng wr(seed + 7);
        auto w = random_tensor(wr, {x.dim(2) / heads, x.dim(2) / heads}, false);
        return check_gradients({x}, [&] { return project(merge_heads(matmul(split_heads(x, heads), w), heads), seed + 1); });
    }});
    cases.push_back({"causal_softmax", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto l = dim_between(rng, 1, 6);
        auto x = random_tensor(rng, {dim_between(rng, 1, 4), l, l}, true, -3.0, 3.0);
        return check_gradients({x}, [&] { return project(softmax(causal_mask(x)), seed + 1); });
    }});
    cases.push_back({"layer_norm", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto d = dim_between(rng, 2, 8);
        auto x = random_tensor(rng, {dim_between(rng, 1, 3), dim_between(rng, 1, 4), d}, true, -2.0, 2.0);
        auto g = random_tensor(rng, {d}, true, 0.5, 1.5);
        auto b = random_tensor(rng, {d});
        return check_gradients({x, g, b}, [&] { return project(layer_norm(x, g, b), seed + 1); });
    }});
    cases.push_back({"conv1d", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto cin = dim_between(rng, 1, 4);
        const auto cout = dim_between(rng, 1, 4);
        const auto ks = 1 + (2 * dim_between(rng, 0, 2));
        auto x = random_tensor(rng, {dim_between(rng, 1, 3), dim_between(rng, 1, 7), cin});
        auto w = random_tensor(rng, {ks, cin, cout});
        auto b = random_tensor(rng, {cout});
        return check_gradients({x, w, b}, [&] { return project(conv1d(x, w, b), seed + 1); });
    }});
    cases.push_back({"cross_entropy", [](std::uint64_t seed) {
        Rng rng(seed);
        const auto batch = dim_between(rng, 1, 8);
        auto z = random_tensor(rng, {batch, 2}, true, -3.0, 3.0);
        std::vector<int> y(batch);
        for (auto& v : y) v = static_cast<int>(rng.below(2));
        const std::array<double, 2> w{rng.uniform(0.2, 2.0), rng.uniform(0.2, 5.0)};
        return check_gradients({z}, [&] { return cross_entropy_logits(z, y, w); });
    }});
    return cases;
}

/// Small configuration of each architecture for 64-bit checks.
inline ModelConfig tiny_config(Arch arch) {
    ModelConfig c;
    c.arch = arch;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.ff_dim = 12;
    c.conv_kernel = 3;
    c.prompt_tokens = 3;
    c.window = 6;
    c.n_features = 3;
    c.dropout = 0.1;
    return c;
}

/// Full-model check: a random coordinate subset of every parameter and the
/// input, training-mode forward with a fixed dropout stream, weighted loss.
inline GradCheckResult model_gradient_check(Arch arch, std::uint64_t seed) {
    const auto cfg = tiny_config(arch);
    auto model = init_model<double>(cfg, seed);
    Rng rng(Rng::derive(seed, "batch"));
    const std::size_t batch = 3;
    auto x = random_tensor(rng, {batch, cfg.window, cfg.n_features}, true, -2.0, 2.0);
    std::vector<int> y(batch);
    for (auto& v : y) v = static_cast<int>(rng.below(2));
    std::vector<Tensor<double>> inputs{x};
    for (auto& p : model.params.items()) inputs.push_back(p.tensor);
    auto loss = [&] {
        Rng masks(Rng::derive(seed, "dropout"));
        ForwardOptions opt{true, &masks};
        return cross_entropy_logits(forward(model, x, opt), y, {0.7, 2.5});
    };
    GradCheckOptions opt;
    opt.max_coords = 6;
    opt.seed = seed;
    return check_gradients(inputs, loss, opt);
}

}  // namespace testing
