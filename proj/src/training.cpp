#include "surgecast/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include <zlib.h>

namespace surgecast {

std::string to_string(ClassWeightMode mode) { return mode == ClassWeightMode::None ? "none" : "balanced"; }

ClassWeightMode parse_class_weight_mode(const std::string& name) {
    if (name == "none") return ClassWeightMode::None;
    if (name == "balanced") return ClassWeightMode::Balanced;
    throw std::invalid_argument("unknown class weight mode '" + name + "' (valid: none, balanced)");
}

void TrainConfig::check() const {
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be at least 1");
    if (!(adam.lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw std::invalid_argument("train config: Adam betas must be in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw std::invalid_argument("train config: eps must be positive");
    if (eval_every == 0) throw std::invalid_argument("train config: eval_every must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
    j = {{"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"lr", cfg.adam.lr},
         {"beta1", cfg.adam.beta1},
         {"beta2", cfg.adam.beta2},
         {"eps", cfg.adam.eps},
         {"class_weights", to_string(cfg.class_weights)},
         {"seed", cfg.seed},
         {"eval_every", cfg.eval_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
    TrainConfig d;
    cfg.epochs = j.value("epochs", d.epochs);
    cfg.batch_size = j.value("batch_size", d.batch_size);
    cfg.adam.lr = j.value("lr", d.adam.lr);
    cfg.adam.beta1 = j.value("beta1", d.adam.beta1);
    cfg.adam.beta2 = j.value("beta2", d.adam.beta2);
    cfg.adam.eps = j.value("eps", d.adam.eps);
    cfg.class_weights = parse_class_weight_mode(j.value("class_weights", to_string(d.class_weights)));
    cfg.seed = j.value("seed", d.seed);
    cfg.eval_every = j.value("eval_every", d.eval_every);
}

std::array<double, 2> compute_class_weights(std::span<const int> labels, ClassWeightMode mode) {
    std::array<std::size_t, 2> counts{0, 0};
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("label " + std::to_string(y) + " is not 0 or 1");
        ++counts[static_cast<std::size_t>(y)];
    }
    if (counts[0] == 0 || counts[1] == 0) {
        throw std::invalid_argument("class " + std::string(counts[0] == 0 ? "0" : "1") + " is absent from the labels");
    }
    if (mode == ClassWeightMode::None) return {1.0, 1.0};
    const auto n = static_cast<double>(labels.size());
    return {n / (2.0 * static_cast<double>(counts[0])), n / (2.0 * static_cast<double>(counts[1]))};
}

void to_json(nlohmann::json& j, const HistoryEntry& e) {
    j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.validation) j["validation"] = *e.validation;
}

void from_json(const nlohmann::json& j, HistoryEntry& e) {
    e.epoch = j.at("epoch").get<std::size_t>();
    e.train_loss = j.at("train_loss").get<double>();
    e.validation.reset();
    if (j.contains("validation")) e.validation = j.at("validation").get<MetricsReport>();
}

void write_history_jsonl(std::ostream& sink, std::span<const HistoryEntry> history) {
    for (const auto& e : history) sink << nlohmann::json(e).dump() << '\n';
}

Checkpoint train(const ModelConfig& model_cfg,
                 const WindowSet& train_windows,
                 const WindowSet* validation,
                 const TrainConfig& cfg,
                 const ProgressFn& progress) {
    cfg.check();
    model_cfg.check();
    if (train_windows.size() == 0) throw std::invalid_argument("training set is empty");
    if (train_windows.length() != model_cfg.window || train_windows.features() != model_cfg.n_features) {
        throw ShapeError("training windows do not match the model configuration");
    }
    const auto w = compute_class_weights(train_windows.labels(), cfg.class_weights);
    const std::array<float, 2> weights{static_cast<float>(w[0]), static_cast<float>(w[1])};

    Checkpoint ck{init_model<float>(model_cfg, Rng::derive(cfg.seed, "init")), cfg, {}, 0, {}};
    ck.adam = AdamState<float>::zeros_like(ck.model.params);
    Rng order(Rng::derive(cfg.seed, "shuffle"));
    Rng masks(Rng::derive(cfg.seed, "dropout"));

    const std::size_t n = train_windows.size();
    const std::size_t per_window = model_cfg.window * model_cfg.n_features;
    std::vector<std::size_t> perm(n);
    std::vector<int> labels;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[order.below(i + 1)]);

        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
            const std::size_t b = std::min(cfg.batch_size, n - start);
            const std::span<const std::size_t> ids(perm.data() + start, b);
            std::vector<float> x(b * per_window);
            train_windows.fill<float>(ids, x);
            labels.resize(b);
            for (std::size_t i = 0; i < b; ++i) labels[i] = train_windows.label(ids[i]);

            auto input = Tensor<float>::from({b, model_cfg.window, model_cfg.n_features}, std::move(x));
            auto logits = forward(ck.model, input, {true, &masks});
            auto loss = cross_entropy_logits<float>(logits, labels, weights);
            ck.model.params.zero_grad();
            loss.backward();

            const double value = loss.item();
            const auto norms = grad_norms(ck.model.params);
            const bool finite_grads = std::all_of(norms.begin(), norms.end(), [](double v) { return std::isfinite(v); });
            if (!std::isfinite(value) || !finite_grads) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index << " (loss " << value
                    << "); gradient norms:";
                const auto& items = ck.model.params.items();
                for (std::size_t i = 0; i < items.size(); ++i) msg << ' ' << items[i].name << '=' << norms[i];
                throw TrainingError(msg.str());
            }
            adam_step(ck.model.params, ck.adam, cfg.adam);
            loss_sum += value * static_cast<double>(b);
        }

        HistoryEntry entry{epoch, loss_sum / static_cast<double>(n), std::nullopt};
        if (validation != nullptr && validation->size() > 0 && epoch % cfg.eval_every == 0) {
            entry.validation = classification_report(ck.model, *validation);
        }
        ck.history.push_back(entry);
        ck.epoch = epoch;
        if (progress) progress(entry);
    }
    return ck;
}

// ---------------------------------------------------------------- checkpoint format

namespace {

constexpr char kMagic[4] = {'S', 'R', 'G', 'C'};
constexpr std::uint8_t kDtypeF32 = 1;

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    template <std::unsigned_integral U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

    void record(const std::string& name, const Shape& shape, std::span<const float> values) {
        uint(static_cast<std::uint32_t>(name.size()));
        bytes(name.data(), name.size());
        uint(kDtypeF32);
        uint(static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) uint(static_cast<std::uint64_t>(d));
        for (float v : values) f32(v);
    }

    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        if (n > buf.size() - pos) {
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  std::string("checkpoint truncated while reading ") + what + " at byte " +
                                      std::to_string(pos));
        }
        auto s = buf.subspan(pos, n);
        pos += n;
        return s;
    }
    template <std::unsigned_integral U>
    U uint(const char* what) {
        const auto s = take(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(s[i]) << (8 * i));
        return v;
    }
    std::size_t remaining() const { return buf.size() - pos; }

    struct Record {
        std::string name;
        Shape shape;
        std::vector<float> values;
    };

    Record record() {
        Record r;
        const auto len = uint<std::uint32_t>("record name length");
        const auto name = take(len, "record name");
        r.name.assign(name.begin(), name.end());
        if (uint<std::uint8_t>("dtype tag") != kDtypeF32) malformed("unknown dtype tag for '" + r.name + "'");
        const auto rank = uint<std::uint32_t>("rank");
        if (rank > 8) malformed("rank " + std::to_string(rank) + " for '" + r.name + "'");
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = uint<std::uint64_t>("dimension");
            if (d != 0 && count > remaining() / d) {
                // The record cannot fit in what is left of the buffer.
                throw CheckpointError(CheckpointError::Kind::Truncated,
                                      "checkpoint truncated inside record '" + r.name + "'");
            }
            r.shape.push_back(static_cast<std::size_t>(d));
            count *= static_cast<std::size_t>(d);
        }
        const auto raw = take(count * 4, "tensor values");
        r.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t v = 0;
            for (std::size_t k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(raw[(4 * i) + k]) << (8 * k);
            r.values[i] = std::bit_cast<float>(v);
        }
        return r;
    }

    [[noreturn]] static void malformed(const std::string& what) {
        throw CheckpointError(CheckpointError::Kind::Malformed, "malformed checkpoint: " + what);
    }

    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1U << 30));
        crc = crc32(crc, bytes.data() + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header = {{"model", ckpt.model.config},
                             {"train", ckpt.train_config},
                             {"epoch", ckpt.epoch},
                             {"adam_t", ckpt.adam.t},
                             {"prompt_text", ckpt.model.prompt_text},
                             {"history", ckpt.history}};
    const std::string text = header.dump();

    Writer w;
    w.bytes(kMagic, 4);
    w.uint(kCheckpointVersion);
    w.uint(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());

    const auto& items = ckpt.model.params.items();
    w.uint(static_cast<std::uint32_t>(items.size()));
    for (const auto& p : items) w.record(p.name, p.tensor.shape(), p.tensor.data());

    const bool has_moments = !ckpt.adam.m.empty();
    if (has_moments && (ckpt.adam.m.size() != items.size() || ckpt.adam.v.size() != items.size())) {
        throw std::invalid_argument("optimizer state does not match the parameter set");
    }
    w.uint(static_cast<std::uint32_t>(has_moments ? 2 * items.size() : 0));
    if (has_moments) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            w.record("adam.m/" + items[i].name, items[i].tensor.shape(), ckpt.adam.m[i]);
            w.record("adam.v/" + items[i].name, items[i].tensor.shape(), ckpt.adam.v[i]);
        }
    }
    w.uint(crc32_of(w.out));
    return std::move(w.out);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    using Kind = CheckpointError::Kind;
    Reader r(bytes);
    const auto magic = r.take(std::min<std::size_t>(4, bytes.size()), "magic");
    if (!std::equal(magic.begin(), magic.end(), kMagic)) {
        throw CheckpointError(Kind::MagicMismatch, "not a checkpoint: magic bytes do not match");
    }
    if (magic.size() < 4) throw CheckpointError(Kind::Truncated, "checkpoint truncated inside the magic bytes");
    const auto version = r.uint<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version) +
                                                            " (this build reads " +
                                                            std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len = r.uint<std::uint32_t>("header length");
    const auto header_bytes = r.take(header_len, "header");

    std::vector<Reader::Record> params;
    const auto n_params = r.uint<std::uint32_t>("parameter count");
    for (std::uint32_t i = 0; i < n_params; ++i) params.push_back(r.record());
    std::vector<Reader::Record> moments;
    const auto n_moments = r.uint<std::uint32_t>("moment count");
    for (std::uint32_t i = 0; i < n_moments; ++i) moments.push_back(r.record());
    const std::size_t payload_end = r.pos;
    const auto stored_crc = r.uint<std::uint32_t>("checksum");
    if (r.remaining() != 0) Reader::malformed(std::to_string(r.remaining()) + " trailing bytes");
    if (crc32_of(bytes.first(payload_end)) != stored_crc) {
        throw CheckpointError(Kind::ChecksumMismatch, "checkpoint checksum mismatch");
    }

    Checkpoint ck;
    try {
        const auto header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
        const auto model_cfg = header.at("model").get<ModelConfig>();
        ck.model = init_model<float>(model_cfg, 0);
        ck.model.prompt_text = header.at("prompt_text").get<std::string>();
        ck.train_config = header.at("train").get<TrainConfig>();
        ck.epoch = header.at("epoch").get<std::size_t>();
        ck.adam.t = header.at("adam_t").get<std::uint64_t>();
        ck.history = header.at("history").get<std::vector<HistoryEntry>>();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        Reader::malformed(std::string("header: ") + e.what());
    }

    auto& items = ck.model.params.items();
    if (params.size() != items.size()) {
        Reader::malformed(std::to_string(params.size()) + " parameters stored, model has " +
                          std::to_string(items.size()));
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& rec = params[i];
        if (rec.name != items[i].name || rec.shape != items[i].tensor.shape()) {
            Reader::malformed("parameter '" + rec.name + "' " + shape_string(rec.shape) + " where '" + items[i].name +
                              "' " + shape_string(items[i].tensor.shape()) + " was expected");
        }
        std::copy(rec.values.begin(), rec.values.end(), items[i].tensor.mutable_data().begin());
    }
    if (n_moments != 0) {
        if (moments.size() != 2 * items.size()) Reader::malformed("optimizer moment count");
        for (std::size_t i = 0; i < items.size(); ++i) {
            auto& m = moments[2 * i];
            auto& v = moments[(2 * i) + 1];
            if (m.name != "adam.m/" + items[i].name || v.name != "adam.v/" + items[i].name ||
                m.shape != items[i].tensor.shape() || v.shape != items[i].tensor.shape()) {
                Reader::malformed("optimizer moments for '" + items[i].name + "'");
            }
            ck.adam.m.push_back(std::move(m.values));
            ck.adam.v.push_back(std::move(v.values));
        }
    }
    return ck;
}

void save_checkpoint(const Checkpoint& ckpt, std::ostream& sink) {
    const auto bytes = serialize_checkpoint(ckpt);
    sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!sink) throw std::runtime_error("failed to write checkpoint");
}

Checkpoint load_checkpoint(std::istream& source) {
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(source)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    save_checkpoint(ckpt, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    return load_checkpoint(in);
}

}  // namespace surgecast
