#include "surgecast/models.hpp"

#include <cmath>
#include <stdexcept>

namespace surgecast {

std::string to_string(Arch arch) {
    switch (arch) {
    case Arch::Simple: return "simple";
    case Arch::Conv: return "conv";
    case Arch::BreakGPT: return "breakgpt";
    }
    return "unknown";
}

Arch parse_arch(std::string_view name) {
    if (name == "simple") return Arch::Simple;
    if (name == "conv") return Arch::Conv;
    if (name == "breakgpt") return Arch::BreakGPT;
    throw std::invalid_argument("unknown architecture '" + std::string(name) +
                                "' (valid: simple, conv, breakgpt)");
}

void ModelConfig::check() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || ff_dim == 0) fail("dimensions must be positive");
    if (d_model % n_heads != 0) {
        fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_model % 2 != 0) fail("d_model must be even for the positional encoding");
    if (window == 0 || n_features == 0) fail("window and n_features must be positive");
    if (arch == Arch::Conv && conv_kernel % 2 == 0) fail("conv_kernel must be odd");
    if (arch == Arch::BreakGPT && prompt_tokens == 0) fail("prompt_tokens must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = {{"arch", to_string(cfg.arch)},
         {"d_model", cfg.d_model},
         {"n_heads", cfg.n_heads},
         {"n_layers", cfg.n_layers},
         {"ff_dim", cfg.ff_dim},
         {"conv_kernel", cfg.conv_kernel},
         {"prompt_tokens", cfg.prompt_tokens},
         {"window", cfg.window},
         {"n_features", cfg.n_features},
         {"dropout", cfg.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    ModelConfig d;
    cfg.arch = parse_arch(j.value("arch", to_string(d.arch)));
    cfg.d_model = j.value("d_model", d.d_model);
    cfg.n_heads = j.value("n_heads", d.n_heads);
    cfg.n_layers = j.value("n_layers", d.n_layers);
    cfg.ff_dim = j.value("ff_dim", d.ff_dim);
    cfg.conv_kernel = j.value("conv_kernel", d.conv_kernel);
    cfg.prompt_tokens = j.value("prompt_tokens", d.prompt_tokens);
    cfg.window = j.value("window", d.window);
    cfg.n_features = j.value("n_features", d.n_features);
    cfg.dropout = j.value("dropout", d.dropout);
}

template <std::floating_point T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.check();
    Model<T> m{cfg, {}, std::string(kPromptText)};
    auto& p = m.params;
    const std::size_t d = cfg.d_model;
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
        p.add(name + ".weight", {in, out}, InitScheme::Uniform, in, seed);
        p.add(name + ".bias", {out}, InitScheme::Zeros, in, seed);
    };
    auto norm = [&](const std::string& name) {
        p.add(name + ".gain", {d}, InitScheme::Ones, d, seed);
        p.add(name + ".shift", {d}, InitScheme::Zeros, d, seed);
    };

    linear("input", cfg.n_features, d);
    if (cfg.arch == Arch::Conv) {
        p.add("conv.weight", {cfg.conv_kernel, d, d}, InitScheme::Uniform, cfg.conv_kernel * d, seed);
        p.add("conv.bias", {d}, InitScheme::Zeros, cfg.conv_kernel * d, seed);
    }
    if (cfg.arch == Arch::BreakGPT) {
        p.add("prompt.embeddings", {cfg.prompt_tokens, d}, InitScheme::Uniform, d, seed);
    }
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        for (const char* proj : {"q", "k", "v", "out"}) linear(b + ".attn." + proj, d, d);
        norm(b + ".ln1");
        linear(b + ".ff.in", d, cfg.ff_dim);
        linear(b + ".ff.out", cfg.ff_dim, d);
        norm(b + ".ln2");
    }
    if (cfg.arch == Arch::BreakGPT) norm("ln_f");
    linear("head", d, 2);
    return m;
}

template <std::floating_point T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d) {
    if (d % 2 != 0) throw std::invalid_argument("positional_encoding: d must be even, got " + std::to_string(d));
    std::vector<T> pe(length * d);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
            pe[(pos * d) + (2 * i)] = static_cast<T>(std::sin(angle));
            pe[(pos * d) + (2 * i) + 1] = static_cast<T>(std::cos(angle));
        }
    }
    return Tensor<T>::from({length, d}, std::move(pe));
}

namespace {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& name) {
    return surgecast::linear(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& name) {
    return layer_norm(x, p.at(name + ".gain"), p.at(name + ".shift"));
}

template <typename T>
Tensor<T> drop(const Tensor<T>& x, const ModelConfig& cfg, const ForwardOptions& opt) {
    if (!opt.training || cfg.dropout == 0.0) return x;
    if (opt.rng == nullptr) throw std::invalid_argument("training forward with dropout needs an Rng");
    return dropout(x, cfg.dropout, *opt.rng, true);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& block) {
    return linear(gelu(linear(x, p, block + ".ff.in")), p, block + ".ff.out");
}

template <typename T>
void check_batch(const Tensor<T>& batch, const ModelConfig& cfg, bool allow_longer) {
    const bool ok = batch.rank() == 3 && batch.dim(0) > 0 && batch.dim(2) == cfg.n_features &&
                    (allow_longer ? batch.dim(1) >= cfg.window : batch.dim(1) == cfg.window);
    if (!ok) {
        throw ShapeError("model expects [B x " + std::to_string(cfg.window) + " x " + std::to_string(cfg.n_features) +
                         "], got " + shape_string(batch.shape()));
    }
}

// Post-norm encoder stack followed by mean pooling and the head.
template <typename T>
Tensor<T> encode_and_classify(Tensor<T> h, const Model<T>& model, const ForwardOptions& opt) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        auto attn = multi_head_attention(h, p, b + ".attn", cfg.n_heads, false).output;
        h = norm(add(h, drop(attn, cfg, opt)), p, b + ".ln1");
        h = norm(add(h, drop(feed_forward(h, p, b), cfg, opt)), p, b + ".ln2");
    }
    return linear(mean_time(h), p, "head");
}

}  // namespace

template <std::floating_point T>
AttentionResult<T> multi_head_attention(const Tensor<T>& x,
                                        const ParameterSet<T>& params,
                                        const std::string& prefix,
                                        std::size_t n_heads,
                                        bool causal) {
    if (x.rank() != 3 || n_heads == 0 || x.dim(2) % n_heads != 0) {
        throw ShapeError("multi_head_attention: " + shape_string(x.shape()) + " with " + std::to_string(n_heads) +
                         " heads");
    }
    const std::size_t dh = x.dim(2) / n_heads;
    auto q = split_heads(linear(x, params, prefix + ".q"), n_heads);
    auto k = split_heads(linear(x, params, prefix + ".k"), n_heads);
    auto v = split_heads(linear(x, params, prefix + ".v"), n_heads);
    auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (causal) scores = causal_mask(scores);
    auto weights = softmax(scores);
    auto out = linear(merge_heads(matmul(weights, v), n_heads), params, prefix + ".out");
    return {out, weights};
}

template <std::floating_point T>
Tensor<T> simple_transformer_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt) {
    const auto& cfg = model.config;
    check_batch(batch, cfg, false);
    auto h = add(linear(batch, model.params, "input"), positional_encoding<T>(cfg.window, cfg.d_model));
    return encode_and_classify(h, model, opt);
}

template <std::floating_point T>
Tensor<T> conv_transformer_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    check_batch(batch, cfg, false);
    auto proj = linear(batch, p, "input");
    auto h = add(proj, silu(conv1d(proj, p.at("conv.weight"), p.at("conv.bias"))));
    h = add(h, positional_encoding<T>(cfg.window, cfg.d_model));
    return encode_and_classify(h, model, opt);
}

template <std::floating_point T>
Tensor<T> breakgpt_forward_at(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    check_batch(batch, cfg, true);
    const std::size_t b = batch.dim(0);
    const std::size_t total = cfg.prompt_tokens + batch.dim(1);

    auto h = concat_time(expand_batch(model.prompt(), b), linear(batch, p, "input"));
    h = add(h, positional_encoding<T>(total, cfg.d_model));
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string blk = "blocks." + std::to_string(i);
        auto attn = multi_head_attention(norm(h, p, blk + ".ln1"), p, blk + ".attn", cfg.n_heads, true).output;
        h = add(h, drop(attn, cfg, opt));
        h = add(h, drop(feed_forward(norm(h, p, blk + ".ln2"), p, blk), cfg, opt));
    }
    h = norm(h, p, "ln_f");
    auto last = reshape(slice_time(h, cfg.prompt_tokens + cfg.window - 1, 1), {b, cfg.d_model});
    return linear(last, p, "head");
}

template <std::floating_point T>
Tensor<T> breakgpt_forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt) {
    check_batch(batch, model.config, false);
    return breakgpt_forward_at(model, batch, opt);
}

template <std::floating_point T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& batch, ForwardOptions opt) {
    switch (model.config.arch) {
    case Arch::Simple: return simple_transformer_forward(model, batch, opt);
    case Arch::Conv: return conv_transformer_forward(model, batch, opt);
    case Arch::BreakGPT: return breakgpt_forward(model, batch, opt);
    }
    throw std::invalid_argument("unknown architecture");
}

#define SURGECAST_INSTANTIATE(T)                                                                            \
    template Model<T> init_model(const ModelConfig&, std::uint64_t);                                        \
    template Tensor<T> positional_encoding(std::size_t, std::size_t);                                       \
    template AttentionResult<T> multi_head_attention(const Tensor<T>&, const ParameterSet<T>&,              \
                                                     const std::string&, std::size_t, bool);                \
    template Tensor<T> simple_transformer_forward(const Model<T>&, const Tensor<T>&, ForwardOptions);       \
    template Tensor<T> conv_transformer_forward(const Model<T>&, const Tensor<T>&, ForwardOptions);         \
    template Tensor<T> breakgpt_forward(const Model<T>&, const Tensor<T>&, ForwardOptions);                 \
    template Tensor<T> breakgpt_forward_at(const Model<T>&, const Tensor<T>&, ForwardOptions);              \
    template Tensor<T> forward(const Model<T>&, const Tensor<T>&, ForwardOptions);

SURGECAST_INSTANTIATE(float)
SURGECAST_INSTANTIATE(double)

#undef SURGECAST_INSTANTIATE

}  // namespace surgecast
