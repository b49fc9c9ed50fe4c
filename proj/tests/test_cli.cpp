#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "surgecast/evaluation.hpp"
#include "surgecast/training.hpp"

namespace fs = std::filesystem;
using namespace surgecast;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

/// Scratch directory with a small synthetic run shared by the cases below.
struct Workspace {
    fs::path root;

    Workspace() {
        setenv("SURGECAST_LOG", "off", 0);
        root = fs::temp_directory_path() / ("surgecast_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(root / "small.json") << R"({"model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "ff_dim": 32, "window": 16},
                                                 "train": {"epochs": 1, "batch_size": 32}})";
        REQUIRE(run({"synth", "--bars", "8000", "--surges", "10", "--seed", "3", "--alignment", "5", "--duration", "30",
                     "--volatility", "0.003", "--output-dir", "synth"}) == cli::kOk);
        REQUIRE(run({"prepare", "--input", path("synth/ohlc.csv"), "--output-dir", "prep"}) == cli::kOk);
    }
    ~Workspace() { fs::remove_all(root); }

    std::string path(const std::string& rel) const { return (root / rel).string(); }

    int run(std::vector<std::string> args) const {
        for (std::size_t i = 0; i + 1 < args.size(); ++i) {
            if (args[i] == "--output-dir") args[i + 1] = path(args[i + 1]);
        }
        return cli::run(args);
    }
};

Workspace& workspace() {
    static Workspace w;
    return w;
}

}  // namespace

TEST_CASE("cli: usage errors") {
    auto& w = workspace();
    CHECK(w.run({}) == cli::kUsage);
    CHECK(w.run({"fly"}) == cli::kUsage);
    CHECK(w.run({"synth", "--bars", "ten", "--output-dir", "x"}) == cli::kUsage);
    CHECK(w.run({"--help"}) == cli::kOk);
    CHECK(w.run({"train", "--input", w.path("prep"), "--output-dir", "t_bad", "--arch", "lstm"}) == cli::kUsage);
    CHECK(w.run({"evaluate", "--input", w.path("prep"), "--checkpoint", w.path("none"), "--output-dir", "e_bad",
                 "--threshold", "2"}) == cli::kUsage);
    CHECK_FALSE(fs::exists(w.root / "t_bad"));
}

TEST_CASE("cli synth: row count, determinism, manifest") {
    auto& w = workspace();
    REQUIRE(w.run({"synth", "--bars", "50000", "--surges", "20", "--seed", "7", "--output-dir", "s1"}) == cli::kOk);
    REQUIRE(w.run({"synth", "--bars", "50000", "--surges", "20", "--seed", "7", "--output-dir", "s2"}) == cli::kOk);
    const auto csv = slurp(w.root / "s1/ohlc.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 50001);
    CHECK(csv == slurp(w.root / "s2/ohlc.csv"));
    CHECK(slurp(w.root / "s1/ground_truth.json") == slurp(w.root / "s2/ground_truth.json"));
    const auto m = read_json(w.root / "s1/manifest.json");
    CHECK(m["command"] == "synth");
    CHECK(m["seed"] == 7);
    CHECK(m["config"]["n_bars"] == 50000);
    CHECK(m["artifacts"][w.path("s1/ohlc.csv")] == cli::file_sha256(w.path("s1/ohlc.csv")));
    CHECK(m.contains("duration_seconds"));
    CHECK(read_json(w.root / "s1/ground_truth.json")["indices"].size() == 20);
}

TEST_CASE("cli synth: impossible placement fails before writing") {
    auto& w = workspace();
    CHECK(w.run({"synth", "--bars", "100", "--surges", "50", "--output-dir", "crowded"}) == cli::kUsage);
    CHECK_FALSE(fs::exists(w.root / "crowded"));
}

TEST_CASE("cli prepare: interval, split, rerun, stage errors") {
    auto& w = workspace();
    const auto info = read_json(w.root / "prep/dataset.json");
    CHECK(info["interval_seconds"] == 300);
    const double test_share = info["test_rows"].get<double>() / (info["train_rows"].get<double>() + info["test_rows"].get<double>());
    CHECK(std::abs(test_share - 0.15) < 0.02);
    for (const char* f : {"bars.csv", "labels.csv", "train_features.csv", "test_features.csv", "norm_stats.json"}) {
        CHECK(fs::exists(w.root / "prep" / f));
    }

    const auto input_hash = cli::file_sha256(w.path("synth/ohlc.csv"));
    REQUIRE(w.run({"prepare", "--input", w.path("synth/ohlc.csv"), "--output-dir", "prep2"}) == cli::kOk);
    CHECK(read_json(w.root / "prep/manifest.json")["artifacts"].size() == read_json(w.root / "prep2/manifest.json")["artifacts"].size());
    for (const char* f : {"bars.csv", "labels.csv", "train_features.csv", "test_features.csv", "norm_stats.json", "dataset.json"}) {
        CHECK(cli::file_sha256(w.path(std::string("prep/") + f)) == cli::file_sha256(w.path(std::string("prep2/") + f)));
    }
    CHECK(cli::file_sha256(w.path("synth/ohlc.csv")) == input_hash);

    REQUIRE(w.run({"prepare", "--config", w.path("prep/manifest.json"), "--output-dir", "prep3"}) == cli::kOk);
    CHECK(slurp(w.root / "prep/train_features.csv") == slurp(w.root / "prep3/train_features.csv"));

    const auto cutoff = read_json(w.root / "prep/dataset.json")["cutoff"].get<std::int64_t>();
    REQUIRE(w.run({"prepare", "--input", w.path("synth/ohlc.csv"), "--output-dir", "prep4", "--cutoff",
                   std::to_string(cutoff - 30000), "--uptrend-threshold", "0.004"}) == cli::kOk);
    CHECK(read_json(w.root / "prep4/dataset.json")["test_rows"] > info["test_rows"]);
    CHECK(read_json(w.root / "prep4/dataset.json")["labeling"]["uptrend_threshold"] == 0.004);

    std::ofstream(w.root / "broken.csv") << "timestamp,open,high,low,close\n60,1,1,2,1\n";
    CHECK(w.run({"prepare", "--input", w.path("broken.csv"), "--output-dir", "p_bad"}) == cli::kInput);
    CHECK(w.run({"prepare", "--input", w.path("missing.csv"), "--output-dir", "p_bad"}) == cli::kInput);
    CHECK(w.run({"prepare", "--input", w.path("synth/ohlc.csv"), "--output-dir", "p_bad", "--cutoff", "1"}) == cli::kUsage);
    CHECK(w.run({"prepare", "--config", w.path("synth/manifest.json"), "--output-dir", "p_bad"}) == cli::kUsage);
}

TEST_CASE("cli train and evaluate") {
    auto& w = workspace();
    const auto cfg = w.path("small.json");
    CHECK(w.run({"train", "--input", w.path("nowhere"), "--output-dir", "t_missing", "--config", cfg}) == cli::kInput);

    REQUIRE(w.run({"train", "--input", w.path("prep"), "--output-dir", "t0", "--config", cfg, "--epochs", "0",
                   "--arch", "simple", "--seed", "4"}) == cli::kOk);
    const auto zero = load_checkpoint(w.path("t0/checkpoint.srgc"));
    const auto init = init_model<float>(zero.model.config, Rng::derive(4, "init"));
    for (std::size_t i = 0; i < init.params.size(); ++i) {
        CHECK(zero.model.params.items()[i].tensor.to_vector() == init.params.items()[i].tensor.to_vector());
    }
    CHECK(zero.model.config.window == 16);

    REQUIRE(w.run({"train", "--input", w.path("prep"), "--output-dir", "t1", "--config", cfg, "--arch", "conv",
                   "--epochs", "2", "--lr", "0.002", "--class-weights", "none"}) == cli::kOk);
    const auto m = read_json(w.root / "t1/manifest.json");
    CHECK(m["config"]["train"]["epochs"] == 2);
    CHECK(m["config"]["train"]["lr"] == 0.002);
    CHECK(m["config"]["train"]["class_weights"] == "none");
    CHECK(m["config"]["model"]["arch"] == "conv");
    std::ifstream hist(w.root / "t1/history.jsonl");
    std::string line;
    std::size_t epochs = 0;
    while (std::getline(hist, line)) ++epochs;
    CHECK(epochs == 2);

    REQUIRE(w.run({"train", "--config", w.path("t1/manifest.json"), "--output-dir", "t1_again"}) == cli::kOk);
    CHECK(slurp(w.root / "t1/checkpoint.srgc") == slurp(w.root / "t1_again/checkpoint.srgc"));
    CHECK(slurp(w.root / "t1/history.jsonl") == slurp(w.root / "t1_again/history.jsonl"));

    REQUIRE(w.run({"evaluate", "--input", w.path("prep"), "--checkpoint", w.path("t1/checkpoint.srgc"), "--output-dir",
                   "e1", "--sweep", "0.05..0.95"}) == cli::kOk);
    const auto report = read_json(w.root / "e1/metrics.json").get<MetricsReport>();
    CHECK(report.model == "conv");
    CHECK(std::abs(report.macro_f1 - ((report.per_class[0].f1 + report.per_class[1].f1) / 2.0)) < 1e-9);
    std::ifstream sweep(w.root / "e1/sweep.csv");
    std::getline(sweep, line);
    CHECK(line == "threshold,precision1,recall1,f1_1");
    double prev = 2.0;
    std::size_t rows = 0;
    while (std::getline(sweep, line)) {
        std::istringstream cells(line);
        std::string t, p, r;
        std::getline(cells, t, ',');
        std::getline(cells, p, ',');
        std::getline(cells, r, ',');
        CHECK(std::stod(r) <= prev);
        prev = std::stod(r);
        ++rows;
    }
    CHECK(rows == 19);

    REQUIRE(w.run({"evaluate", "--config", w.path("e1/manifest.json"), "--output-dir", "e1_again"}) == cli::kOk);
    CHECK(slurp(w.root / "e1/metrics.json") == slurp(w.root / "e1_again/metrics.json"));
    CHECK(slurp(w.root / "e1/sweep.csv") == slurp(w.root / "e1_again/sweep.csv"));

    auto other = zero;
    ModelConfig narrow = zero.model.config;
    narrow.n_features = 3;
    other.model = init_model<float>(narrow, 1);
    other.adam = AdamState<float>::zeros_like(other.model.params);
    save_checkpoint(other, w.path("narrow.srgc"));
    CHECK(w.run({"evaluate", "--input", w.path("prep"), "--checkpoint", w.path("narrow.srgc"), "--output-dir", "e_bad"}) ==
          cli::kInput);
    std::ofstream(w.root / "junk.srgc") << "not a checkpoint";
    CHECK(w.run({"evaluate", "--input", w.path("prep"), "--checkpoint", w.path("junk.srgc"), "--output-dir", "e_bad"}) ==
          cli::kInput);
}

TEST_CASE("sha256 of a known string") {
    auto& w = workspace();
    std::ofstream(w.root / "abc.txt") << "abc";
    CHECK(cli::file_sha256(w.path("abc.txt")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
