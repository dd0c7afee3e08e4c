#include "upgd/errors.hpp"
#include "upgd/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kPartial = 2;

void print_cells(const upgd::SweepSummary& summary) {
    for (const auto& label : summary.labels) {
        try {
            const auto& best = summary.best(label);
            std::printf("%-20s best step %-8g score %.6g\n", label.c_str(), best.step_size, best.mean_score);
        } catch (const upgd::Error&) {
            std::printf("%-20s every step size diverged\n", label.c_str());
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Utility-based perturbed gradient descent experiments"};
    app.require_subcommand(1);

    std::string run_config;
    upgd::ConfigOverrides overrides;
    std::string out_dir;
    auto* run = app.add_subcommand("run", "Train every method, step size and seed of a config");
    run->add_option("config", run_config, "Config file (JSON)")->required();
    run->add_option("--preset", overrides.preset, "Start from a named preset")
        ->check(CLI::IsMember(upgd::preset_names()));
    run->add_option("--seeds", overrides.seeds, "Use seeds 0..N-1")->check(CLI::PositiveNumber);
    run->add_option("--steps", overrides.steps, "Steps per run")->check(CLI::PositiveNumber);
    run->add_option("--out", out_dir, "Output directory");
    run->add_option("--workers", overrides.workers, "Parallel runs")->check(CLI::PositiveNumber);

    std::string probe_config;
    std::string probe_out;
    auto* probe = app.add_subcommand("probe", "Rank-correlate approximate utilities with the ablation oracle");
    probe->add_option("config", probe_config, "Config file (JSON)")->required();
    probe->add_option("--out", probe_out, "Output directory");

    std::string summary_dir;
    auto* summarize = app.add_subcommand("summarize", "Rebuild summaries from a finished sweep directory");
    summarize->add_option("dir", summary_dir, "Sweep output directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kFailure;
    }

    try {
        if (*run) {
            if (!out_dir.empty()) {
                overrides.out_dir = out_dir;
            }
            const auto config = upgd::load_config(run_config, overrides);
            config.validate();
            const auto summary = upgd::run_experiment(config);
            print_cells(summary);
            std::printf("wrote %s\n", config.out_dir.string().c_str());
            return summary.partial() ? kPartial : kOk;
        }
        if (*probe) {
            upgd::ConfigOverrides probe_overrides;
            if (!probe_out.empty()) {
                probe_overrides.out_dir = probe_out;
            }
            const auto config = upgd::load_config(probe_config, probe_overrides);
            const auto summary = upgd::run_quality_probe(config);
            for (std::size_t c = 0; c < summary.columns.size(); ++c) {
                std::printf("%-18s mean rank correlation %.4f\n", summary.columns[c].c_str(), summary.mean[c]);
            }
            std::printf("wrote %s\n", config.out_dir.string().c_str());
            return summary.scaling_violations > 0 ? kFailure : kOk;
        }
        if (*summarize) {
            const auto summary = upgd::summarize_directory(summary_dir);
            print_cells(summary);
            return summary.partial() ? kPartial : kOk;
        }
    } catch (const upgd::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kFailure;
}
