#include "upgd/metrics.hpp"

#include "upgd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace upgd {

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i + 1;
        while (j < order.size() && values[order[j]] == values[order[i]]) {
            ++j;
        }
        // positions i..j-1 share ranks i+1..j
        const double rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            ranks[order[k]] = rank;
        }
        i = j;
    }
    return ranks;
}

RankCorrelation spearman(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw LengthMismatch("spearman: " + std::to_string(u.size()) + " vs " + std::to_string(v.size()) + " items");
    }
    if (u.size() < 2) {
        throw InvalidArgument("spearman needs at least two items");
    }
    const auto finite = [](double x) { return std::isfinite(x); };
    if (!std::all_of(u.begin(), u.end(), finite) || !std::all_of(v.begin(), v.end(), finite)) {
        throw NonFinite("spearman: non-finite input");
    }
    const auto ru = average_ranks(u);
    const auto rv = average_ranks(v);
    const double n = static_cast<double>(u.size());
    const double mean = (n + 1.0) / 2.0;  // ranks always average to this
    double suv = 0.0;
    double suu = 0.0;
    double svv = 0.0;
    for (std::size_t k = 0; k < ru.size(); ++k) {
        const double a = ru[k] - mean;
        const double b = rv[k] - mean;
        suv += a * b;
        suu += a * a;
        svv += b * b;
    }
    if (suu == 0.0 || svv == 0.0) {
        throw ConstantInput("spearman: constant input");
    }
    const double rho = std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
    return {rho, u.size()};
}

namespace {

template <class Layers>
std::vector<std::vector<double>> flatten_layers(const Layers& layers, Scope scope) {
    std::vector<std::vector<double>> out;
    if (scope == Scope::global) {
        out.emplace_back();
    }
    for (const auto& m : layers) {
        if (scope == Scope::per_layer) {
            out.emplace_back();
        }
        auto& dst = out.back();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                dst.push_back(m(i, j));
            }
        }
    }
    return out;
}

}  // namespace

std::vector<std::vector<double>> flatten_utilities(const WeightUtility& u, Scope scope) {
    return flatten_layers(u.layers, scope);
}

std::vector<std::vector<double>> flatten_utilities(const FeatureUtility& u, Scope scope) {
    return flatten_layers(u.layers, scope);
}

std::vector<std::vector<double>> flatten_utilities(const std::vector<Matrix>& u, Scope scope) {
    return flatten_layers(u, scope);
}

RunRecord summarize_run(std::span<const StepRecord> records, std::int64_t task_period) {
    if (records.empty()) {
        throw InvalidArgument("summarize_run: no records");
    }
    RunRecord run;
    run.steps.assign(records.begin(), records.end());
    const bool has_accuracy = records.front().accuracy.has_value();
    const auto period = task_period > 0 ? static_cast<std::size_t>(task_period) : records.size();

    double acc_auc = 0.0;
    for (std::size_t k = 0; k < records.size(); ++k) {
        const auto& r = records[k];
        run.loss_auc += r.loss;
        if (has_accuracy) {
            acc_auc += r.accuracy.value_or(0.0);
        }
        const auto task = static_cast<std::int64_t>(k / period);
        if (run.tasks.empty() || run.tasks.back().task != task) {
            run.tasks.push_back({task, 0, 0.0, has_accuracy ? std::optional<double>(0.0) : std::nullopt});
        }
        auto& agg = run.tasks.back();
        ++agg.steps;
        agg.mean_loss += r.loss;
        if (has_accuracy) {
            *agg.mean_accuracy += r.accuracy.value_or(0.0);
        }
    }
    for (auto& agg : run.tasks) {
        agg.mean_loss /= static_cast<double>(agg.steps);
        if (agg.mean_accuracy) {
            *agg.mean_accuracy /= static_cast<double>(agg.steps);
        }
    }
    if (has_accuracy) {
        run.accuracy_auc = acc_auc;
    }

    const std::size_t window = std::min<std::size_t>(5, run.tasks.size());
    const std::size_t first_end = std::min(records.size(), window * period);
    const std::size_t last_begin = (run.tasks.size() - window) * period;
    run.first5_loss = mean_loss(records, 0, first_end);
    run.last5_loss = mean_loss(records, last_begin, records.size());
    if (has_accuracy) {
        run.first5_accuracy = mean_accuracy(records, 0, first_end);
        run.last5_accuracy = mean_accuracy(records, last_begin, records.size());
    }
    return run;
}

double mean_loss(std::span<const StepRecord> records, std::size_t begin, std::size_t end) {
    end = std::min(end, records.size());
    if (begin >= end) {
        throw InvalidArgument("mean_loss: empty window");
    }
    double sum = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
        sum += records[k].loss;
    }
    return sum / static_cast<double>(end - begin);
}

double mean_accuracy(std::span<const StepRecord> records, std::size_t begin, std::size_t end) {
    end = std::min(end, records.size());
    if (begin >= end) {
        throw InvalidArgument("mean_accuracy: empty window");
    }
    double sum = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
        sum += records[k].accuracy.value_or(0.0);
    }
    return sum / static_cast<double>(end - begin);
}

}  // namespace upgd
