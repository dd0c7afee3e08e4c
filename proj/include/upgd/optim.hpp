#pragma once

#include "upgd/nn.hpp"
#include "upgd/utility.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace upgd {

enum class Rule {
    sgd,
    pgd,
    anti_pgd,
    ups_weight,
    ups_feature,
    upgd_weight,
    upgd_feature,
    upgd_weight_nonprotecting,
    upgd_feature_nonprotecting,
};

[[nodiscard]] std::string to_string(Rule rule);
[[nodiscard]] Rule parse_rule(std::string_view name);

[[nodiscard]] bool uses_weight_utility(Rule rule);
[[nodiscard]] bool uses_feature_utility(Rule rule);
[[nodiscard]] inline bool uses_utility(Rule rule) { return uses_weight_utility(rule) || uses_feature_utility(rule); }

/// `none` yields zero perturbations; it exists for equivalence checks.
enum class NoiseKind { none, normal, anticorrelated };

[[nodiscard]] std::string to_string(NoiseKind kind);
[[nodiscard]] NoiseKind parse_noise_kind(std::string_view name);

/// Per-parameter perturbation source. Slots are independent noise sequences
/// (one per layer); anticorrelated slots remember their previous draw, which
/// starts at zero.
class NoiseState {
public:
    NoiseState(NoiseKind kind, std::uint64_t seed);

    /// Draws fresh N(0,1) values and returns the perturbation for `slot`.
    [[nodiscard]] Matrix sample(std::size_t slot, Eigen::Index rows, Eigen::Index cols);

    /// Perturbation for an externally supplied draw: the draw itself for
    /// normal noise, draw minus the previous draw for anticorrelated noise.
    [[nodiscard]] Matrix next(std::size_t slot, const Matrix& draw);

    [[nodiscard]] NoiseKind kind() const { return kind_; }

private:
    NoiseKind kind_;
    std::mt19937_64 rng_;
    std::vector<Matrix> previous_;
};

[[nodiscard]] inline Matrix make_noise(NoiseState& state, Eigen::Index rows, Eigen::Index cols) {
    return state.sample(0, rows, cols);
}

struct OptimizerConfig {
    Rule rule = Rule::sgd;
    double step_size = 0.01;
    UtilityKind utility = UtilityKind::second_order;
    Scaling scaling = Scaling::global;
    std::optional<Squash> phi;  // sigmoid for global, tanh for layer-wise when unset
    double beta = 0.0;
    NoiseKind noise = NoiseKind::anticorrelated;
    bool noise_decay = true;      // xi *= tanh(loss) for utility-gated rules
    bool running_max_eta = false;  // global scaling: running max instead of per-step max
    /// Diagnostic: skip utility estimation and gate every utility-bearing
    /// parameter with this scaled utility.
    std::optional<double> pinned_utility;

    [[nodiscard]] Squash squash() const {
        return phi.value_or(scaling == Scaling::global ? Squash::sigmoid : Squash::tanh);
    }
    /// Whether apply_step reads curvature from the backward trace.
    [[nodiscard]] bool needs_curvature() const {
        return uses_utility(rule) && !pinned_utility && utility == UtilityKind::second_order;
    }
    /// Throws ConfigError for inconsistent settings.
    void validate() const;
};

/// Direction d such that the rule's update is W <- W - alpha * d, given the
/// gradient, the perturbation and the gate (1 - scaled utility).
[[nodiscard]] Matrix update_direction(Rule rule, const Matrix& grad, const Matrix& noise, const Matrix& gate);

class OptimizerState {
public:
    OptimizerState(OptimizerConfig config, std::uint64_t seed);

    [[nodiscard]] const OptimizerConfig& config() const { return config_; }
    [[nodiscard]] std::int64_t steps() const { return steps_; }

    // Utilities from the latest step, for logging and contract checks.
    [[nodiscard]] const std::optional<WeightUtility>& last_weight_utility() const { return raw_weight_; }
    [[nodiscard]] const std::optional<ScaledUtility<WeightUtility>>& last_scaled_weight() const { return scaled_weight_; }
    [[nodiscard]] const std::optional<FeatureUtility>& last_feature_utility() const { return raw_feature_; }
    [[nodiscard]] const std::optional<ScaledUtility<FeatureUtility>>& last_scaled_feature() const {
        return scaled_feature_;
    }

private:
    friend void apply_step(OptimizerState&, Network&, const BackwardTrace&, double);

    OptimizerConfig config_;
    NoiseState noise_;
    std::mt19937_64 utility_rng_;
    UtilityTrace<WeightUtility> weight_trace_;
    UtilityTrace<FeatureUtility> feature_trace_;
    double running_eta_;
    std::int64_t steps_ = 0;

    std::optional<WeightUtility> raw_weight_;
    std::optional<ScaledUtility<WeightUtility>> scaled_weight_;
    std::optional<FeatureUtility> raw_feature_;
    std::optional<ScaledUtility<FeatureUtility>> scaled_feature_;

    std::vector<Matrix> scratch_weight_;
    std::vector<Vector> scratch_bias_;
};

/// Updates `net` in place according to the configured rule. Throws Diverged
/// (leaving `net` untouched) if any updated parameter would be non-finite.
void apply_step(OptimizerState& state, Network& net, const BackwardTrace& bwd, double loss);

}  // namespace upgd
