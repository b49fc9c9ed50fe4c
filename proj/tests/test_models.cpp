#include <doctest.h>

#include <cmath>

#include "support.hpp"

using namespace surgecast;
using TD = Tensor<double>;

namespace {

std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t block = (4 * ((d * d) + d))            // q, k, v, out
                              + (2 * (2 * d))                // two norms
                              + ((d * c.ff_dim) + c.ff_dim)  // ff in
                              + ((c.ff_dim * d) + d);        // ff out
    std::size_t n = ((c.n_features * d) + d) + (c.n_layers * block) + ((2 * d) + 2);
    if (c.arch == Arch::Conv) n += (c.conv_kernel * d * d) + d;
    if (c.arch == Arch::BreakGPT) n += (c.prompt_tokens * d) + (2 * d);
    return n;
}

TD random_batch(std::uint64_t seed, std::size_t b, const ModelConfig& c, std::size_t len = 0) {
    surgecast::Rng rng(seed);
    return testing::random_tensor(rng, {b, len == 0 ? c.window : len, c.n_features}, false, -2, 2);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

const Arch kArchs[] = {Arch::Simple, Arch::Conv, Arch::BreakGPT};

}  // namespace

TEST_CASE("arch names") {
    CHECK(parse_arch("breakgpt") == Arch::BreakGPT);
    CHECK(to_string(Arch::Conv) == "conv");
    try {
        parse_arch("lstm");
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("simple") != std::string::npos);
        CHECK(msg.find("conv") != std::string::npos);
        CHECK(msg.find("breakgpt") != std::string::npos);
    }
}

TEST_CASE("config validation and json") {
    ModelConfig c;
    c.n_heads = 5;
    CHECK_THROWS_AS(c.check(), std::invalid_argument);
    c = ModelConfig{};
    c.arch = Arch::BreakGPT;
    c.window = 32;
    nlohmann::json j = c;
    CHECK(j.get<ModelConfig>() == c);
}

TEST_CASE("positional encoding") {
    const auto pe = positional_encoding<double>(50, 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(pe.data()[i] == (i % 2 == 0 ? 0.0 : 1.0));
    for (double v : pe.data()) CHECK(std::abs(v) <= 1.0);
    CHECK(pe.data()[16] == doctest::Approx(0.8414709848078965).epsilon(1e-15));
    CHECK_THROWS_AS(positional_encoding<double>(4, 7), std::invalid_argument);
}

TEST_CASE("attention: singleton, row sums, causality") {
    auto cfg = testing::tiny_config(Arch::Simple);
    auto model = init_model<double>(cfg, 3);
    surgecast::Rng rng(4);
    const auto one = testing::random_tensor(rng, {2, 1, cfg.d_model}, false);
    const auto r1 = multi_head_attention(one, model.params, "blocks.0.attn", cfg.n_heads, false);
    for (double w : r1.weights.data()) CHECK(w == 1.0);
    const auto& p = model.params;
    const auto v = linear(linear(one, p.at("blocks.0.attn.v.weight"), p.at("blocks.0.attn.v.bias")),
                          p.at("blocks.0.attn.out.weight"), p.at("blocks.0.attn.out.bias"));
    CHECK(max_abs_diff(r1.output.data(), v.data()) < 1e-12);

    auto x = testing::random_tensor(rng, {2, 7, cfg.d_model}, false);
    for (bool causal : {false, true}) {
        const auto r = multi_head_attention(x, p, "blocks.0.attn", cfg.n_heads, causal);
        const auto w = r.weights.data();
        for (std::size_t row = 0; row < w.size() / 7; ++row) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) s += w[(row * 7) + c];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
    const auto base = multi_head_attention(x, p, "blocks.0.attn", cfg.n_heads, true).output;
    const std::size_t t = 3;
    auto y = TD::from(x.shape(), x.to_vector());
    for (std::size_t pos = t + 1; pos < 7; ++pos) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) y.mutable_data()[(pos * cfg.d_model) + c] += 5.0;
    }
    const auto moved = multi_head_attention(y, p, "blocks.0.attn", cfg.n_heads, true).output;
    for (std::size_t pos = 0; pos <= t; ++pos) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
            const std::size_t i = (pos * cfg.d_model) + c;
            CHECK(moved.data()[i] == base.data()[i]);
        }
    }
}

TEST_CASE("forwards: shape, purity, duplicate rows, batch invariance") {
    for (Arch arch : kArchs) {
        INFO(to_string(arch));
        auto cfg = testing::tiny_config(arch);
        const auto model = init_model<double>(cfg, 5);
        const auto x = random_batch(6, 4, cfg);
        const auto y1 = forward(model, x);
        CHECK(y1.shape() == Shape{4, 2});
        CHECK(forward(model, x).to_vector() == y1.to_vector());

        auto dup = TD::from(x.shape(), x.to_vector());
        const std::size_t block = cfg.window * cfg.n_features;
        std::copy_n(x.data().begin(), block, dup.mutable_data().begin() + block);
        const auto yd = forward(model, dup).to_vector();
        CHECK(yd[0] == yd[2]);
        CHECK(yd[1] == yd[3]);

        for (std::size_t b = 0; b < 4; ++b) {
            std::vector<double> win(x.data().begin() + (b * block), x.data().begin() + ((b + 1) * block));
            const auto single = forward(model, TD::from({1, cfg.window, cfg.n_features}, win));
            CHECK(std::abs(single.data()[0] - y1.data()[2 * b]) < 1e-6);
            CHECK(std::abs(single.data()[1] - y1.data()[(2 * b) + 1]) < 1e-6);
        }
        CHECK_THROWS_AS(forward(model, random_batch(1, 2, cfg, cfg.window + 1)), ShapeError);
    }
}

TEST_CASE("forwards: default geometry") {
    for (Arch arch : kArchs) {
        ModelConfig cfg;
        cfg.arch = arch;
        const auto model = init_model<float>(cfg, 1);
        CHECK(model.params.count() == expected_parameter_count(cfg));
        surgecast::Rng rng(2);
        std::vector<float> v(2 * 64 * 8);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
        CHECK(forward(model, Tensor<float>::from({2, 64, 8}, v)).shape() == Shape{2, 2});
    }
}

TEST_CASE("forwards: all-zero parameters and input give zero logits") {
    for (Arch arch : kArchs) {
        auto model = init_model<double>(testing::tiny_config(arch), 1);
        for (auto& p : model.params.items()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
        const auto& c = model.config;
        const auto y = forward(model, TD::zeros({2, c.window, c.n_features}));
        for (double v : y.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("conv: centered identity kernel reduces the branch to silu of the projection") {
    auto cfg = testing::tiny_config(Arch::Conv);
    auto model = init_model<double>(cfg, 7);
    auto& w = model.params.at("conv.weight");
    std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    const std::size_t d = cfg.d_model;
    for (std::size_t c = 0; c < d; ++c) w.mutable_data()[((1 * d) + c) * d + c] = 1.0;
    const auto& p = model.params;
    const auto x = random_batch(8, 3, cfg);
    const auto proj = linear(x, p.at("input.weight"), p.at("input.bias"));
    const auto branch = silu(conv1d(proj, w, p.at("conv.bias")));
    CHECK(max_abs_diff(branch.data(), silu(proj).to_vector()) < 1e-9);
}

TEST_CASE("gradient flow reaches every parameter") {
    for (Arch arch : kArchs) {
        INFO(to_string(arch));
        ModelConfig cfg;
        cfg.arch = arch;
        cfg.window = 16;
        auto model = init_model<double>(cfg, 9);
        const auto x = random_batch(10, 4, cfg);
        const std::vector<int> y{0, 1, 0, 1};
        cross_entropy_logits(forward(model, x), y).backward();
        std::size_t zeros = 0;
        std::size_t total = 0;
        for (const auto& p : model.params.items()) {
            INFO(p.name);
            bool any = false;
            for (double g : p.tensor.grad()) {
                zeros += g == 0.0 ? 1 : 0;
                any = any || g != 0.0;
            }
            total += p.tensor.numel();
            CHECK(any);
        }
        CHECK(static_cast<double>(zeros) / static_cast<double>(total) < 0.01);
    }
}

TEST_CASE("breakgpt: prompt matters, positions after the window do not") {
    auto cfg = testing::tiny_config(Arch::BreakGPT);
    auto model = init_model<double>(cfg, 11);
    const auto x = random_batch(12, 2, cfg);
    const auto base = forward(model, x).to_vector();

    auto& prompt = model.params.at("prompt.embeddings");
    for (std::size_t row = 0; row < cfg.prompt_tokens; ++row) {
        const double saved = prompt.data()[row * cfg.d_model];
        prompt.mutable_data()[row * cfg.d_model] += 0.5;
        CHECK(forward(model, x).to_vector() != base);
        prompt.mutable_data()[row * cfg.d_model] = saved;
    }
    for (std::size_t t = 0; t < cfg.window; ++t) {
        auto y = TD::from(x.shape(), x.to_vector());
        y.mutable_data()[t * cfg.n_features] += 0.5;
        CHECK(forward(model, y).to_vector() != base);
    }

    const std::size_t extra = 3;
    auto longer = random_batch(13, 2, cfg, cfg.window + extra);
    const std::size_t row = cfg.n_features;
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < cfg.window; ++t) {
            for (std::size_t f = 0; f < row; ++f) {
                longer.mutable_data()[(((b * (cfg.window + extra)) + t) * row) + f] = x.data()[(((b * cfg.window) + t) * row) + f];
            }
        }
    }
    // Masked positions change only the GEMM blocking, not the math.
    CHECK(max_abs_diff(breakgpt_forward_at(model, longer).to_vector(), base) < 1e-12);

    cross_entropy_logits(forward(model, x), std::vector<int>{0, 1}).backward();
    bool any = false;
    for (double g : prompt.grad()) any = any || g != 0.0;
    CHECK(any);
}

TEST_CASE("init: deterministic and seed-sensitive") {
    const auto cfg = testing::tiny_config(Arch::Conv);
    const auto a = init_model<double>(cfg, 1);
    const auto b = init_model<double>(cfg, 1);
    const auto c = init_model<double>(cfg, 2);
    bool differs = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params.items()[i].tensor.to_vector() == b.params.items()[i].tensor.to_vector());
        differs = differs || a.params.items()[i].tensor.to_vector() != c.params.items()[i].tensor.to_vector();
    }
    CHECK(differs);
    CHECK(a.prompt_text == kPromptText);
}

TEST_CASE("dropout needs a generator in training mode") {
    const auto cfg = testing::tiny_config(Arch::Simple);
    const auto model = init_model<double>(cfg, 1);
    CHECK_THROWS_AS(forward(model, random_batch(1, 1, cfg), ForwardOptions{true, nullptr}), std::invalid_argument);
}

TEST_CASE("full models pass finite differences") {
    for (Arch arch : kArchs) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            INFO(to_string(arch) << " seed " << seed);
            const auto r = testing::model_gradient_check(arch, seed);
            CHECK(r.rel_error < 1e-4);
        }
    }
}
