#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "surgecast/evaluation.hpp"
#include "surgecast/labeling.hpp"
#include "surgecast/market_data.hpp"
#include "surgecast/models.hpp"
#include "surgecast/synthesis.hpp"
#include "surgecast/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace surgecast::cli {

namespace {

constexpr const char* kVersion = "surgecast 0.1.0";

class CommandError : public std::runtime_error {
public:
    CommandError(ExitCode code, const std::string& what) : std::runtime_error(what), code(code) {}
    ExitCode code;
};

std::shared_ptr<spdlog::logger> log() {
    static auto logger = [] {
        auto l = spdlog::stderr_color_st("surgecast");
        const char* env = std::getenv("SURGECAST_LOG");
        l->set_level(env != nullptr ? spdlog::level::from_str(env) : spdlog::level::info);
        l->set_pattern("[%l] %v");
        return l;
    }();
    return logger;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CommandError(kInput, "cannot read '" + path + "'");
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw CommandError(kRuntime, "cannot write '" + path.string() + "'");
}

json read_json(const std::string& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw CommandError(kInput, "'" + path + "' is not valid JSON: " + e.what());
    }
}

/// Accepts a plain config object or a manifest written by the same command.
json load_config(const std::string& path, const std::string& command) {
    json j = read_json(path);
    if (j.contains("command") && j.contains("config")) {
        if (j["command"] != command) {
            throw CommandError(kUsage, "manifest '" + path + "' belongs to '" + j["command"].get<std::string>() +
                                           "', not '" + command + "'");
        }
        return j["config"];
    }
    return j;
}

// Flags win; otherwise a path recorded in the config (e.g. a replayed manifest).
std::string resolve_input(const std::string& flag, const json& cfg, const char* key) {
    if (!flag.empty()) return flag;
    if (cfg.contains(key) && cfg[key].is_string()) return cfg[key].get<std::string>();
    throw CommandError(kUsage, std::string("--") + key + " is required");
}

fs::path prepare_output_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw CommandError(kRuntime, "cannot create output directory '" + dir + "'");
    return dir;
}

class Manifest {
public:
    Manifest(std::string command, std::uint64_t seed)
        : command_(std::move(command)), seed_(seed), start_(std::chrono::steady_clock::now()) {}

    void config(json c) { config_ = std::move(c); }
    void input(const std::string& path) { inputs_[path] = file_sha256(path); }
    void artifact(const fs::path& path) { artifacts_[path.string()] = file_sha256(path.string()); }

    void write(const fs::path& dir) const {
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        json j = {{"command", command_},
                  {"version", kVersion},
                  {"config", config_},
                  {"seed", seed_},
                  {"inputs", inputs_},
                  {"artifacts", artifacts_},
                  {"duration_seconds", seconds}};
        write_text(dir / "manifest.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    std::uint64_t seed_;
    std::chrono::steady_clock::time_point start_;
    json config_;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> artifacts_;
};

// Runs one pipeline stage, tagging failures with the command and stage.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const CommandError&) {
        throw;
    } catch (const DataError& e) {
        throw CommandError(kInput, name + ": " + e.what());
    } catch (const CheckpointError& e) {
        throw CommandError(kInput, name + ": " + e.what());
    } catch (const std::exception& e) {
        throw CommandError(kRuntime, name + ": " + e.what());
    }
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string output_dir;
    std::string config;
    std::optional<std::size_t> bars, surges, duration, alignment;
    std::optional<double> volatility, drift, magnitude, start_price;
    std::optional<std::int64_t> start_timestamp, interval;
    std::optional<std::uint64_t> seed;
};

void cmd_synth(const SynthArgs& a) {
    SynthConfig cfg;
    if (!a.config.empty()) cfg = load_config(a.config, "synth").get<SynthConfig>();
    if (a.bars) cfg.n_bars = *a.bars;
    if (a.surges) cfg.surge_count = *a.surges;
    if (a.duration) cfg.surge_duration = *a.duration;
    if (a.alignment) cfg.surge_alignment = *a.alignment;
    if (a.volatility) cfg.volatility = *a.volatility;
    if (a.drift) cfg.drift = *a.drift;
    if (a.magnitude) cfg.surge_magnitude = *a.magnitude;
    if (a.start_price) cfg.start_price = *a.start_price;
    if (a.start_timestamp) cfg.start_timestamp = *a.start_timestamp;
    if (a.interval) cfg.interval_seconds = *a.interval;
    if (a.seed) cfg.seed = *a.seed;

    SurgeInjection out;
    try {
        out = synthesize(cfg);
    } catch (const SynthError& e) {
        throw CommandError(kUsage, std::string("synth: ") + e.what());
    }
    const auto dir = prepare_output_dir(a.output_dir);
    Manifest manifest("synth", cfg.seed);
    manifest.config(cfg);

    std::ostringstream csv;
    write_ohlc_csv(csv, out.series);
    write_text(dir / "ohlc.csv", csv.str());
    json truth = {{"indices", out.ground_truth}, {"starts", out.starts}};
    std::vector<std::int64_t> ts;
    for (auto i : out.ground_truth) ts.push_back(out.series.bars[i].timestamp);
    truth["timestamps"] = ts;
    write_text(dir / "ground_truth.json", truth.dump(2) + "\n");
    manifest.artifact(dir / "ohlc.csv");
    manifest.artifact(dir / "ground_truth.json");
    manifest.write(dir);
    log()->info("synth: {} bars, {} surges -> {}", out.series.size(), out.ground_truth.size(), dir.string());
}

// ---------------------------------------------------------------- prepare

struct PrepareArgs {
    std::string input;
    std::string output_dir;
    std::string config;
    std::optional<std::size_t> factor;
    std::optional<std::int64_t> cutoff;
    std::optional<std::size_t> extrema_window, confirmations;
    std::optional<double> uptrend_threshold;
};

constexpr double kDefaultTestFraction = 0.15;

void cmd_prepare(const PrepareArgs& a) {
    json cfg = a.config.empty() ? json::object() : load_config(a.config, "prepare");
    std::size_t factor = cfg.value("factor", std::size_t{5});
    if (a.factor) factor = *a.factor;
    if (factor == 0) throw CommandError(kUsage, "--factor must be positive");
    std::optional<std::int64_t> cutoff;
    if (cfg.contains("cutoff") && !cfg["cutoff"].is_null()) cutoff = cfg["cutoff"].get<std::int64_t>();
    if (a.cutoff) cutoff = *a.cutoff;
    const auto indicators = cfg.value("indicators", json::object()).get<IndicatorConfig>();
    auto labeling = cfg.value("labeling", json::object()).get<LabelingConfig>();
    if (a.extrema_window) labeling.extrema_window = *a.extrema_window;
    if (a.confirmations) labeling.confirmations = *a.confirmations;
    if (a.uptrend_threshold) labeling.uptrend_threshold = *a.uptrend_threshold;
    try {
        labeling.check();
    } catch (const std::invalid_argument& e) {
        throw CommandError(kUsage, e.what());
    }
    const std::string input = resolve_input(a.input, cfg, "input");

    const auto raw = stage("prepare/parse", [&] { return read_ohlc_csv(input); });
    const auto bars = stage("prepare/resample", [&] { return resample(raw, factor); });
    if (bars.empty()) throw CommandError(kInput, "prepare/resample: no complete bar groups");
    if (!cutoff) {
        // Trailing share of the range, mirroring a one-month test tail.
        const auto first = bars.bars.front().timestamp;
        const auto span = bars.bars.back().timestamp - first;
        const auto step = bars.interval_seconds;
        const auto offset = static_cast<std::int64_t>(std::llround(static_cast<double>(span) * (1.0 - kDefaultTestFraction)));
        cutoff = first + ((offset / step) * step);
    }
    const auto frame = stage("prepare/features", [&] { return build_feature_frame(bars, indicators); });
    const auto closes = bars.closes();
    const auto targets = stage("prepare/labels", [&] { return label_series(closes, labeling); });
    std::pair<Dataset, Dataset> split;
    try {
        split = split_chronological(frame, targets, *cutoff);
    } catch (const std::invalid_argument& e) {
        throw CommandError(kUsage, std::string("prepare/split: ") + e.what());
    }
    const auto& [train, test] = split;

    json resolved = {{"input", input}, {"factor", factor}, {"cutoff", *cutoff}, {"indicators", indicators}, {"labeling", labeling}};
    const auto dir = prepare_output_dir(a.output_dir);
    Manifest manifest("prepare", 0);
    manifest.config(resolved);
    manifest.input(input);

    std::ostringstream s;
    write_ohlc_csv(s, bars);
    write_text(dir / "bars.csv", s.str());
    std::vector<std::int64_t> ts;
    for (const auto& b : bars.bars) ts.push_back(b.timestamp);
    s.str("");
    write_labels_csv(s, ts, targets);
    write_text(dir / "labels.csv", s.str());
    s.str("");
    write_feature_csv(s, train.frame);
    write_text(dir / "train_features.csv", s.str());
    s.str("");
    write_feature_csv(s, test.frame);
    write_text(dir / "test_features.csv", s.str());
    write_text(dir / "norm_stats.json", norm_stats_to_json(train.frame.norm_stats).dump(2) + "\n");

    auto positives = [](const Dataset& d) { return std::count(d.labels.begin(), d.labels.end(), 1); };
    json info = resolved;
    info.erase("input");
    info["interval_seconds"] = bars.interval_seconds;
    info["features"] = train.frame.names;
    info["train_rows"] = train.rows();
    info["test_rows"] = test.rows();
    info["train_positive"] = positives(train);
    info["test_positive"] = positives(test);
    write_text(dir / "dataset.json", info.dump(2) + "\n");

    for (const char* f : {"bars.csv", "labels.csv", "train_features.csv", "test_features.csv", "norm_stats.json", "dataset.json"}) {
        manifest.artifact(dir / f);
    }
    manifest.write(dir);
    log()->info("prepare: {} bars at {} s, train {} rows ({} positive), test {} rows ({} positive)", bars.size(),
                bars.interval_seconds, train.rows(), positives(train), test.rows(), positives(test));
}

Dataset load_split(const fs::path& dir, const std::string& which, Manifest& manifest) {
    const auto features = (dir / (which + "_features.csv")).string();
    const auto labels = (dir / "labels.csv").string();
    const auto stats = (dir / "norm_stats.json").string();
    for (const auto& p : {features, labels, stats}) {
        if (!fs::exists(p)) throw CommandError(kInput, "missing prepared input '" + p + "' (run prepare first)");
    }
    auto data = stage("load", [&] {
        auto frame = read_feature_csv(features);
        frame.norm_stats = norm_stats_from_json(read_json(stats));
        frame.normalized = true;
        return join_labels(frame, read_labels_csv(labels));
    });
    manifest.input(features);
    manifest.input(labels);
    manifest.input(stats);
    return data;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string input;
    std::string output_dir;
    std::string config;
    std::optional<std::string> arch;
    std::optional<std::size_t> epochs, batch_size, eval_every, window;
    std::optional<double> lr;
    std::optional<std::string> class_weights;
    std::optional<std::uint64_t> seed;
};

std::size_t default_epochs(Arch arch) {
    switch (arch) {
    case Arch::Simple: return 100;
    case Arch::Conv: return 50;
    case Arch::BreakGPT: return 10;
    }
    return 50;
}

void cmd_train(const TrainArgs& a) {
    json cfg = a.config.empty() ? json::object() : load_config(a.config, "train");
    ModelConfig model;
    TrainConfig tc;
    double validation_fraction = 0.1;
    try {
        json mj = cfg.value("model", json::object());
        if (a.arch) mj["arch"] = *a.arch;
        model = mj.get<ModelConfig>();
        json tj = cfg.value("train", json::object());
        if (!tj.contains("epochs")) tj["epochs"] = default_epochs(model.arch);
        if (a.class_weights) tj["class_weights"] = *a.class_weights;
        tc = tj.get<TrainConfig>();
        validation_fraction = cfg.value("validation_fraction", validation_fraction);
    } catch (const std::invalid_argument& e) {
        throw CommandError(kUsage, e.what());
    } catch (const json::exception& e) {
        throw CommandError(kUsage, std::string("invalid train config: ") + e.what());
    }
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.eval_every) tc.eval_every = *a.eval_every;
    if (a.lr) tc.adam.lr = *a.lr;
    if (a.seed) tc.seed = *a.seed;
    if (a.window) model.window = *a.window;

    const std::string input = resolve_input(a.input, cfg, "input");
    Manifest manifest("train", tc.seed);
    const auto data = load_split(input, "train", manifest);
    model.n_features = data.frame.cols();
    try {
        model.check();
        tc.check();
    } catch (const std::invalid_argument& e) {
        throw CommandError(kUsage, e.what());
    }
    const json resolved = {{"input", input}, {"model", model}, {"train", tc}, {"validation_fraction", validation_fraction}};
    manifest.config(resolved);

    std::optional<WindowSet> validation;
    WindowSet train_windows;
    if (validation_fraction > 0.0) {
        const auto [fit, held] = stage("train/split", [&] { return split_tail(data, validation_fraction); });
        train_windows = stage("train/windows", [&] { return make_windows(fit, model.window); });
        if (held.rows() >= model.window) validation = make_windows(held, model.window);
    } else {
        train_windows = stage("train/windows", [&] { return make_windows(data, model.window); });
    }
    log()->info("train: {} on {} windows ({} validation), {} epochs", to_string(model.arch), train_windows.size(),
                validation ? validation->size() : 0, tc.epochs);

    Checkpoint ckpt;
    try {
        ckpt = train(model, train_windows, validation ? &*validation : nullptr, tc, [](const HistoryEntry& e) {
            if (e.validation) {
                log()->info("epoch {}: loss {:.6f}, validation class-1 f1 {:.4f}", e.epoch, e.train_loss,
                            e.validation->per_class[1].f1);
            } else {
                log()->info("epoch {}: loss {:.6f}", e.epoch, e.train_loss);
            }
        });
    } catch (const TrainingError& e) {
        throw CommandError(kRuntime, std::string("train: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CommandError(kInput, std::string("train: ") + e.what());
    }

    const auto dir = prepare_output_dir(a.output_dir);
    save_checkpoint(ckpt, (dir / "checkpoint.srgc").string());
    std::ostringstream hist;
    write_history_jsonl(hist, ckpt.history);
    write_text(dir / "history.jsonl", hist.str());
    manifest.artifact(dir / "checkpoint.srgc");
    manifest.artifact(dir / "history.jsonl");
    manifest.write(dir);
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string input;
    std::string checkpoint;
    std::string output_dir;
    std::string config;
    std::optional<double> threshold;
    std::optional<std::string> sweep;
};

void cmd_evaluate(const EvaluateArgs& a) {
    json cfg = a.config.empty() ? json::object() : load_config(a.config, "evaluate");
    double threshold = cfg.value("threshold", 0.5);
    if (a.threshold) threshold = *a.threshold;
    std::string sweep = cfg.value("sweep", std::string());
    if (a.sweep) sweep = *a.sweep;
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw CommandError(kUsage, "--threshold must be in [0, 1]");
    std::vector<double> thresholds;
    if (!sweep.empty()) {
        try {
            thresholds = parse_sweep(sweep);
        } catch (const std::invalid_argument& e) {
            throw CommandError(kUsage, e.what());
        }
    }

    const std::string input = resolve_input(a.input, cfg, "input");
    const std::string checkpoint = resolve_input(a.checkpoint, cfg, "checkpoint");
    Manifest manifest("evaluate", 0);
    manifest.config({{"input", input}, {"checkpoint", checkpoint}, {"threshold", threshold}, {"sweep", sweep}});
    if (!fs::exists(checkpoint)) throw CommandError(kInput, "missing checkpoint '" + checkpoint + "'");
    const auto ckpt = stage("evaluate/checkpoint", [&] { return load_checkpoint(checkpoint); });
    manifest.input(checkpoint);
    const auto data = load_split(input, "test", manifest);
    const auto& mc = ckpt.model.config;
    if (data.frame.cols() != mc.n_features) {
        throw CommandError(kInput, "checkpoint expects " + std::to_string(mc.n_features) + " features, test set has " +
                                       std::to_string(data.frame.cols()));
    }
    const auto windows = stage("evaluate/windows", [&] { return make_windows(data, mc.window); });
    const auto p1 = stage("evaluate/forward", [&] { return predict_probabilities(ckpt.model, windows); });
    const auto report = report_from_probabilities(p1, windows.labels(), threshold, to_string(mc.arch));

    const auto dir = prepare_output_dir(a.output_dir);
    write_text(dir / "metrics.json", json(report).dump(2) + "\n");
    manifest.artifact(dir / "metrics.json");
    if (!thresholds.empty()) {
        std::ostringstream s;
        write_sweep_csv(s, threshold_sweep(p1, windows.labels(), thresholds));
        write_text(dir / "sweep.csv", s.str());
        manifest.artifact(dir / "sweep.csv");
    }
    manifest.write(dir);
    log()->info("evaluate: {} windows, class-1 precision {:.4f} recall {:.4f} f1 {:.4f}, macro f1 {:.4f}",
                windows.size(), report.per_class[1].precision, report.per_class[1].recall, report.per_class[1].f1,
                report.macro_f1);
}

}  // namespace

std::string file_sha256(const std::string& path) {
    const std::string bytes = read_text(path);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw CommandError(kRuntime, "sha256 failed for '" + path + "'");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"Uptrend detection pipeline: synth, prepare, train, evaluate", "surgecast"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic OHLC series with injected surges");
    synth->add_option("--output-dir", sa.output_dir, "Directory for ohlc.csv, ground_truth.json, manifest.json")->required();
    synth->add_option("--config", sa.config, "JSON config or a previous synth manifest");
    synth->add_option("--bars", sa.bars, "Number of bars");
    synth->add_option("--surges", sa.surges, "Number of injected surges");
    synth->add_option("--seed", sa.seed, "Random seed");
    synth->add_option("--volatility", sa.volatility, "Per-bar log-return standard deviation");
    synth->add_option("--drift", sa.drift, "Per-bar log drift");
    synth->add_option("--magnitude", sa.magnitude, "Surge size as a fraction");
    synth->add_option("--duration", sa.duration, "Bars from first peak to top");
    synth->add_option("--alignment", sa.alignment, "Align surges to this resampling factor");
    synth->add_option("--start-price", sa.start_price, "Initial price");
    synth->add_option("--start-timestamp", sa.start_timestamp, "Epoch seconds of the first bar");
    synth->add_option("--interval", sa.interval, "Bar interval in seconds");

    PrepareArgs pa;
    auto* prepare = app.add_subcommand("prepare", "Resample, engineer features, label and split");
    prepare->add_option("--input", pa.input, "OHLC CSV");
    prepare->add_option("--output-dir", pa.output_dir, "Directory for prepared files")->required();
    prepare->add_option("--config", pa.config, "JSON config or a previous prepare manifest");
    prepare->add_option("--factor", pa.factor, "Resampling factor (default 5)");
    prepare->add_option("--cutoff", pa.cutoff, "Epoch seconds; bars before it are training data");
    prepare->add_option("--extrema-window", pa.extrema_window, "Width of the centered extrema window (odd)");
    prepare->add_option("--confirmations", pa.confirmations, "Extrema needed to confirm a swing");
    prepare->add_option("--uptrend-threshold", pa.uptrend_threshold, "Minimum relative rise between highs");

    TrainArgs ta;
    auto* trainc = app.add_subcommand("train", "Train a model on a prepared dataset");
    trainc->add_option("--input", ta.input, "Prepared dataset directory");
    trainc->add_option("--output-dir", ta.output_dir, "Directory for checkpoint and history")->required();
    trainc->add_option("--config", ta.config, "JSON config or a previous train manifest");
    trainc->add_option("--arch", ta.arch, "simple, conv or breakgpt");
    trainc->add_option("--epochs", ta.epochs, "Epochs (default 100 simple, 50 conv, 10 breakgpt)");
    trainc->add_option("--batch-size", ta.batch_size, "Minibatch size");
    trainc->add_option("--lr", ta.lr, "Adam learning rate");
    trainc->add_option("--class-weights", ta.class_weights, "none or balanced");
    trainc->add_option("--seed", ta.seed, "Random seed");
    trainc->add_option("--eval-every", ta.eval_every, "Epochs between validation passes");
    trainc->add_option("--window", ta.window, "Window length in bars");

    EvaluateArgs ea;
    auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on the test split");
    evaluate->add_option("--input", ea.input, "Prepared dataset directory");
    evaluate->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
    evaluate->add_option("--output-dir", ea.output_dir, "Directory for metrics.json")->required();
    evaluate->add_option("--config", ea.config, "JSON config or a previous evaluate manifest");
    evaluate->add_option("--threshold", ea.threshold, "Class-1 probability threshold (default 0.5)");
    evaluate->add_option("--sweep", ea.sweep, "Threshold sweep lo..hi[:step] written to sweep.csv");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) cmd_synth(sa);
        else if (*prepare) cmd_prepare(pa);
        else if (*trainc) cmd_train(ta);
        else if (*evaluate) cmd_evaluate(ea);
    } catch (const CommandError& e) {
        log()->error("{}", e.what());
        return e.code;
    } catch (const std::exception& e) {
        log()->error("{}", e.what());
        return kRuntime;
    }
    return kOk;
}

}  // namespace surgecast::cli
