#pragma once

#include "upgd/utility.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace upgd {

struct RankCorrelation {
    double rho = 0.0;
    std::size_t n_items = 0;
};

/// Ranks starting at 1; tied values share the mean of their ranks.
[[nodiscard]] std::vector<double> average_ranks(std::span<const double> values);

/// Spearman's rho as the Pearson correlation of average ranks.
/// Throws LengthMismatch, ConstantInput, or InvalidArgument (fewer than 2 items).
[[nodiscard]] RankCorrelation spearman(std::span<const double> u, std::span<const double> v);

enum class Scope { global, per_layer };

/// Global scope yields one list (layers concatenated, row-major, bias column
/// included); per-layer scope yields one list per layer.
[[nodiscard]] std::vector<std::vector<double>> flatten_utilities(const WeightUtility& u, Scope scope);
[[nodiscard]] std::vector<std::vector<double>> flatten_utilities(const FeatureUtility& u, Scope scope);
[[nodiscard]] std::vector<std::vector<double>> flatten_utilities(const std::vector<Matrix>& u, Scope scope);

struct StepRecord {
    std::int64_t step = 0;  // 0-based
    double loss = 0.0;
    std::optional<double> accuracy;
};

struct TaskAggregate {
    std::int64_t task = 0;
    std::size_t steps = 0;
    double mean_loss = 0.0;
    std::optional<double> mean_accuracy;
};

struct RunRecord {
    std::vector<StepRecord> steps;
    std::vector<TaskAggregate> tasks;
    double loss_auc = 0.0;                // sum of per-step loss
    std::optional<double> accuracy_auc;   // sum of per-step accuracy
    double first5_loss = 0.0;             // mean over the steps of the first five tasks
    double last5_loss = 0.0;
    std::optional<double> first5_accuracy;
    std::optional<double> last5_accuracy;

    /// Lower is better: loss AUC, or negated accuracy AUC for classification.
    [[nodiscard]] double selection_score() const {
        return accuracy_auc ? -*accuracy_auc : loss_auc;
    }
};

/// Aggregates per-step records into per-task statistics. `task_period` of 0
/// treats the run as a single task.
[[nodiscard]] RunRecord summarize_run(std::span<const StepRecord> records, std::int64_t task_period);

/// Mean loss (or accuracy) over steps with index in [begin, end).
[[nodiscard]] double mean_loss(std::span<const StepRecord> records, std::size_t begin, std::size_t end);
[[nodiscard]] double mean_accuracy(std::span<const StepRecord> records, std::size_t begin, std::size_t end);

}  // namespace upgd
