#include "upgd/csv.hpp"
#include "upgd/errors.hpp"
#include "upgd/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

using namespace upgd;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("upgd_harness_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Every CSV below `dir`, relative path -> contents.
std::map<std::string, std::string> csv_files(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") {
            out[fs::relative(e.path(), dir).string()] = slurp(e.path());
        }
    }
    return out;
}

ExperimentConfig small_sweep(const fs::path& out) {
    auto cfg = resolve_config(R"({
        "preset": "changing-adder",
        "network": {"hidden": [8, 6]},
        "methods": ["sgd", "upgd_weight", {"rule": "upgd_feature", "beta": 0.9}],
        "step_sizes": [0.01, 0.001],
        "seeds": [0, 1],
        "steps": 120,
        "batch_size": 4,
        "scaling_check_interval": 1
    })");
    cfg.out_dir = out;
    return cfg;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("presets resolve") {
    for (const auto& name : preset_names()) {
        const auto cfg = preset_config(name);
        CHECK(cfg.preset == name);
        CHECK_FALSE(cfg.methods.empty());
        if (!needs_mnist(cfg.stream)) {
            CHECK_NOTHROW(cfg.validate());
        }
    }
    CHECK_THROWS_AS((void)preset_config("nope"), ConfigError);

    const auto probe = preset_config("quality-probe");
    CHECK(probe.layer_sizes(5, 1) == std::vector<std::size_t>{5, 50, 1});
    CHECK(probe.steps == 2000);
    CHECK(probe.batch_size == 32);
    CHECK(preset_config("quality-probe-feature").hidden == std::vector<std::size_t>{50, 50});
    const auto adder = preset_config("changing-adder");
    CHECK(adder.steps == 5000);
    CHECK(task_period(adder.stream) == 100);
    CHECK(adder.seeds.size() == 5);
    CHECK(adder.step_sizes.size() == 6);
    CHECK(preset_config("label-permuted-mnist").loss() == Loss::softmax_cross_entropy);
}

TEST_CASE("config precedence") {
    const std::string file = R"({"preset": "changing-adder", "steps": 300, "seeds": [4, 5]})";
    CHECK(resolve_config(file).steps == 300);
    CHECK(resolve_config(file).seeds == std::vector<std::uint64_t>{4, 5});
    ConfigOverrides o;
    o.steps = 50;
    o.seeds = 3;
    o.workers = 2;
    o.out_dir = "elsewhere";
    const auto cfg = resolve_config(file, o);
    CHECK(cfg.steps == 50);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(cfg.workers == 2);
    CHECK(cfg.out_dir == "elsewhere");
    CHECK(cfg.activation == Activation::identity());

    ConfigOverrides preset;
    preset.preset = "permuted-adder";
    const auto swapped = resolve_config(file, preset);
    CHECK(std::holds_alternative<PermutedAdder>(swapped.stream));
    CHECK(swapped.steps == 300);

    const auto bare = resolve_config("{}");
    CHECK(bare.methods.size() == 1);
    CHECK(bare.methods[0].label == "sgd");
}

TEST_CASE("method labels") {
    const auto cfg = resolve_config(R"({"methods": ["upgd_weight",
        {"rule": "upgd_weight", "utility": "first_order"},
        {"rule": "upgd_weight", "scaling": "layerwise"},
        {"rule": "ups_feature", "label": "mine", "noise": "normal"}]})");
    REQUIRE(cfg.methods.size() == 4);
    CHECK(cfg.methods[0].label == "upgd_weight");
    CHECK(cfg.methods[1].label == "upgd_weight_first_order");
    CHECK(cfg.methods[2].label == "upgd_weight_layerwise");
    CHECK(cfg.methods[3].label == "mine");
    CHECK(cfg.methods[3].optimizer.noise == NoiseKind::normal);
}

TEST_CASE("config errors") {
    const auto bad = [](const std::string& text) { return resolve_config(text).validate(); };
    CHECK_THROWS_AS(bad("{not json"), ConfigError);
    CHECK_THROWS_AS(bad("[1, 2]"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"stepz": 5})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"version": 2})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"preset": "unknown"})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"methods": ["adam"]})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"methods": [{"utility": "first_order"}]})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"methods": ["sgd", "sgd"]})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"methods": []})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"step_sizes": []})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"step_sizes": [-1]})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"steps": 0})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"steps": "many"})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"seeds": []})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"stream": {"kind": "river"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"stream": {"kind": "permuted_adder", "n_inputs": 5}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"network": {"activation": "gelu"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"network": {"hidden": []}, "methods": ["upgd_feature"]})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"probe": {"target": "bias"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"preset": "stationary-mnist", "mnist_dir": "/nonexistent"})"), ConfigError);
    CHECK_THROWS_AS((void)load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config serialisation round-trips") {
    for (const auto& name : preset_names()) {
        const auto cfg = preset_config(name);
        const auto text = config_to_json(cfg);
        CHECK(config_to_json(resolve_config(text)) == text);
    }
}

TEST_CASE("sweeps are reproducible across worker counts") {
    TempDir a;
    TempDir b;
    auto cfg = small_sweep(a.path);
    cfg.workers = 1;
    const auto sa = run_experiment(cfg);
    cfg.out_dir = b.path;
    cfg.workers = 3;
    const auto sb = run_experiment(cfg);

    const auto fa = csv_files(a.path);
    const auto fb = csv_files(b.path);
    CHECK(fa.size() == 3 * 2 * 2 + 3);
    CHECK(fa == fb);
    CHECK_FALSE(sa.partial());
    CHECK(sa.cells.size() == 6);
    for (const auto& run : sa.runs) {
        if (run.method > 0) {
            CHECK(run.scaling_checks == 120);
            CHECK(run.scaling_violations == 0);
        } else {
            CHECK(run.scaling_checks == 0);
        }
    }

    SUBCASE("per-run files") {
        const auto table = csv::read(a.path / sa.runs[0].file);
        CHECK(table.header == std::vector<std::string>{"step", "task_index", "loss", "accuracy"});
        CHECK(table.rows.size() == 120);
        CHECK(table.rows[105][1] == "1");
        CHECK(table.rows[0][3].empty());
    }
    SUBCASE("all rules see the same data") {
        // identical initial networks on identical batches give identical first losses
        const auto first_loss = [&](const RunOutcome& r) { return csv::read(a.path / r.file).rows[0][2]; };
        for (const auto& run : sa.runs) {
            const auto& reference = sa.runs[run.seed == 0 ? 0 : 1];
            CHECK(first_loss(run) == first_loss(reference));
        }
    }
    SUBCASE("summaries rebuild from the directory") {
        const auto before = slurp(a.path / "summary.csv");
        const auto best_before = slurp(a.path / "best.csv");
        const auto runs_before = slurp(a.path / "runs.csv");
        fs::remove(a.path / "summary.csv");
        fs::remove(a.path / "best.csv");
        const auto rebuilt = summarize_directory(a.path);
        CHECK(slurp(a.path / "summary.csv") == before);
        CHECK(slurp(a.path / "best.csv") == best_before);
        CHECK(slurp(a.path / "runs.csv") == runs_before);
        CHECK(rebuilt.cells.size() == sa.cells.size());
        for (const auto& label : sa.labels) {
            CHECK(rebuilt.best(label).step_size == sa.best(label).step_size);
        }
    }
}

TEST_CASE("a diverging cell does not stop the sweep") {
    TempDir dir;
    auto cfg = resolve_config(R"({
        "preset": "changing-adder",
        "network": {"hidden": [8]},
        "methods": ["sgd"],
        "step_sizes": [1e6, 0.01],
        "seeds": [0, 1],
        "steps": 60,
        "batch_size": 4
    })");
    cfg.out_dir = dir.path;
    const auto summary = run_experiment(cfg);
    CHECK(summary.partial());
    REQUIRE(summary.cells.size() == 2);
    CHECK(summary.cells[0].n_diverged == 2);
    CHECK(std::isinf(summary.cells[0].mean_score));
    CHECK_FALSE(summary.cells[0].best);
    CHECK(summary.cells[1].best);
    CHECK(summary.best("sgd").step_size == 0.01);
    CHECK(summary.runs[0].diverged);
    CHECK_FALSE(summary.runs[0].diagnostic.empty());
    CHECK_FALSE(summary.runs[2].diverged);
    const auto runs = csv::read(dir.path / "runs.csv");
    CHECK(runs.rows[0][runs.column("status")] == "diverged");
    CHECK(summarize_directory(dir.path).partial());
}

TEST_CASE("classification sweeps record accuracy") {
    TempDir dir;
    auto data = std::make_shared<MnistDataset>();
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    data->rows = 2;
    data->cols = 2;
    data->images.resize(50, 4);
    for (int n = 0; n < 50; ++n) {
        data->labels.push_back(n % 10);
        for (int p = 0; p < 4; ++p) data->images(n, p) = u(rng);
    }
    auto cfg = resolve_config(R"({"preset": "label-permuted-mnist", "network": {"hidden": [6]},
        "methods": ["sgd", "ups_feature"], "step_sizes": [0.1], "seeds": [3], "steps": 40, "batch_size": 4,
        "stream": {"period": 10}})");
    cfg.out_dir = dir.path;
    const auto summary = run_experiment(cfg, data);
    const auto table = csv::read(dir.path / summary.runs[0].file);
    CHECK_FALSE(table.rows[0][3].empty());
    CHECK(table.rows[39][1] == "3");
    CHECK(summary.cells[0].mean_last5_accuracy.has_value());
    CHECK(summary.runs[1].scaling_checks > 0);
    CHECK(summary.runs[1].scaling_violations == 0);
}

TEST_CASE("scaling contract checker") {
    CHECK(check_scaling_contract({{1.0, 2.0, 3.0}}, {{0.2, 0.5, 1.0}}, 3.0));
    CHECK(check_scaling_contract({{1.0, 1.0}, {3.0}}, {{0.4, 0.4}, {1.0}}, 3.0));
    CHECK_FALSE(check_scaling_contract({{1.0, 2.0, 3.0}}, {{0.5, 0.2, 1.0}}, 3.0));
    CHECK_FALSE(check_scaling_contract({{1.0, 2.0}}, {{0.5, 1.2}}, 2.0));
    CHECK_FALSE(check_scaling_contract({{1.0, 2.0}}, {{-0.1, 1.0}}, 2.0));
    CHECK_FALSE(check_scaling_contract({{1.0, 2.0}}, {{0.5}}, 2.0));
    // a negative eta reverses the ordering before clamping
    CHECK(check_scaling_contract({{-4.0, -2.0, -1.0}}, {{1.0, 1.0, 1.0}}, -1.0));
    CHECK(check_scaling_contract({{-4.0, -1.0}}, {{0.9, 0.5}}, -1.0));
    CHECK_FALSE(check_scaling_contract({{-4.0, -1.0}}, {{0.5, 0.9}}, -1.0));

    WeightUtility u;
    u.layers.push_back((Matrix(2, 3) << 0.3, -2.0, 5.0, 1e-3, 0.0, -7.0).finished());
    const auto scaled = scale_global(u, Squash::sigmoid);
    CHECK(check_scaling_contract(flatten_utilities(u, Scope::global), flatten_utilities(scaled.values, Scope::global),
                                 scaled.eta));
}

TEST_CASE("quality probe") {
    TempDir dir;
    auto cfg = preset_config("quality-probe");
    cfg.steps = 25;
    cfg.seeds = {0, 1};
    cfg.probe_burn_in = 5;
    cfg.out_dir = dir.path;
    const auto summary = run_quality_probe(cfg);
    CHECK(summary.columns == std::vector<std::string>{"second_order", "first_order", "weight_magnitude", "random"});
    CHECK(summary.scaling_checks == 50);
    CHECK(summary.scaling_violations == 0);
    const auto per_step = csv::read(dir.path / "probe_s1.csv");
    CHECK(per_step.rows.size() == 25);
    CHECK(per_step.header.size() == 6);
    const auto layers = csv::read(dir.path / "probe_layers_s0.csv");
    CHECK(layers.rows.size() == 50);
    const auto table = csv::read(dir.path / "probe_summary.csv");
    CHECK(table.rows.size() == 3);
    CHECK(table.rows.back()[0] == "mean");
    CHECK(table.rows.back()[table.column("scaling_checks")] == "50");
    for (double m : summary.mean) {
        CHECK(std::abs(m) <= 1.0);
    }

    TempDir again;
    cfg.out_dir = again.path;
    cfg.workers = 2;
    (void)run_quality_probe(cfg);
    CHECK(csv_files(dir.path) == csv_files(again.path));

    SUBCASE("feature probe") {
        TempDir fdir;
        auto fcfg = preset_config("quality-probe-feature");
        fcfg.steps = 10;
        fcfg.seeds = {0};
        fcfg.probe_burn_in = 0;
        fcfg.out_dir = fdir.path;
        const auto fs = run_quality_probe(fcfg);
        CHECK(fs.columns.size() == 3);
        CHECK(csv::read(fdir.path / "probe_layers_s0.csv").rows.size() == 20);
    }
}

}
