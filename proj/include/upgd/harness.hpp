#pragma once

#include "upgd/metrics.hpp"
#include "upgd/nn.hpp"
#include "upgd/optim.hpp"
#include "upgd/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace upgd {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kMnistDirEnv = "UPGD_MNIST_DIR";

/// One optimizer entry of a sweep. The step size is filled in from the grid.
struct Method {
    std::string label;
    OptimizerConfig optimizer;
};

enum class ProbeTarget { weight, feature };

struct ExperimentConfig {
    int version = kConfigVersion;
    std::string preset;
    StreamKind stream = ChangingAdder{};
    std::vector<std::size_t> hidden{300, 150};
    Activation activation = Activation::tanh();
    std::vector<Method> methods;
    std::vector<double> step_sizes{1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::int64_t steps = 5000;
    std::size_t batch_size = 32;
    std::filesystem::path out_dir = "results";
    std::size_t workers = 1;
    std::string mnist_dir;  // empty: $UPGD_MNIST_DIR, then data/mnist
    /// Check the global scaling contract every this many steps (0 disables).
    std::int64_t scaling_check_interval = 1;

    ProbeTarget probe_target = ProbeTarget::weight;
    double probe_step_size = 0.01;
    std::int64_t probe_burn_in = 200;  // first step counted in probe means

    [[nodiscard]] Loss loss() const { return is_classification(stream) ? Loss::softmax_cross_entropy : Loss::mse; }
    [[nodiscard]] std::vector<std::size_t> layer_sizes(std::size_t inputs, std::size_t outputs) const;
    /// Throws ConfigError describing the first problem found. With
    /// `check_files` false the MNIST files are not looked up.
    void validate(bool check_files = true) const;
};

/// Command-line overrides, applied after the preset and the config file.
struct ConfigOverrides {
    std::optional<std::string> preset;
    std::optional<std::size_t> seeds;  // seeds 0..N-1
    std::optional<std::int64_t> steps;
    std::optional<std::filesystem::path> out_dir;
    std::optional<std::size_t> workers;
};

[[nodiscard]] std::vector<std::string> preset_names();
[[nodiscard]] ExperimentConfig preset_config(std::string_view name);

/// Preset defaults, then the JSON document, then `overrides`.
[[nodiscard]] ExperimentConfig resolve_config(const std::string& json_text, const ConfigOverrides& overrides = {});
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});
[[nodiscard]] std::string config_to_json(const ExperimentConfig& config);

/// Loads the dataset the config points at (config, env var, data/mnist).
[[nodiscard]] std::shared_ptr<const MnistDataset> load_config_mnist(const ExperimentConfig& config);

struct RunOutcome {
    std::size_t method = 0;
    std::size_t step_index = 0;
    std::uint64_t seed = 0;
    bool diverged = false;
    std::string diagnostic;
    std::string file;              // per-step CSV, relative to the output directory
    RunRecord record;              // per-step records are dropped after summarising
    std::int64_t scaling_checks = 0;
    std::int64_t scaling_violations = 0;
};

struct CellSummary {
    std::string label;
    Rule rule = Rule::sgd;
    double step_size = 0.0;
    std::size_t n_seeds = 0;
    std::size_t n_diverged = 0;
    double mean_score = 0.0;  // +inf when any seed diverged
    double mean_first5_loss = 0.0;
    double mean_last5_loss = 0.0;
    std::optional<double> mean_first5_accuracy;
    std::optional<double> mean_last5_accuracy;
    bool best = false;
};

struct SweepSummary {
    std::vector<RunOutcome> runs;   // grid order: method, step size, seed
    std::vector<CellSummary> cells; // grid order: method, step size
    std::vector<std::string> labels;

    [[nodiscard]] bool partial() const;
    /// Best cell of a method label (lowest mean score); throws if absent.
    [[nodiscard]] const CellSummary& best(const std::string& label) const;
    /// Runs belonging to one cell.
    [[nodiscard]] std::vector<const RunOutcome*> cell_runs(const std::string& label, double step_size) const;
};

/// Trains every (method, step size, seed) cell, writing one CSV per run plus
/// runs.csv, summary.csv, best.csv and config.json into config.out_dir.
[[nodiscard]] SweepSummary run_experiment(const ExperimentConfig& config,
                                          std::shared_ptr<const MnistDataset> mnist = nullptr);

/// Rebuilds summary.csv and best.csv from the per-run CSVs of a sweep directory.
[[nodiscard]] SweepSummary summarize_directory(const std::filesystem::path& dir);

struct ProbeSummary {
    std::vector<std::string> columns;              // utility names, in CSV order
    std::vector<std::vector<double>> seed_means;   // [seed][column], steps >= burn-in
    std::vector<double> mean;                      // across seeds
    std::int64_t scaling_checks = 0;
    std::int64_t scaling_violations = 0;
};

/// Spearman correlation of every approximate utility against the ablation
/// oracle, at every SGD step, for each seed. Writes probe_s<seed>.csv,
/// probe_layers_s<seed>.csv and probe_summary.csv.
[[nodiscard]] ProbeSummary run_quality_probe(const ExperimentConfig& config);

/// Checks the global scaling contract: entries in [0, 1] and the raw ordering
/// preserved. Returns false on violation.
[[nodiscard]] bool check_scaling_contract(const std::vector<std::vector<double>>& raw,
                                          const std::vector<std::vector<double>>& scaled, double eta);

}  // namespace upgd
