#pragma once

#include "upgd/nn.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace upgd {

/// Per-parameter utilities. Each layer is [out x (in + 1)]; the last column
/// belongs to the bias.
struct WeightUtility {
    std::vector<Matrix> layers;

    [[nodiscard]] Matrix::ColsBlockXpr weights(std::size_t l) {
        return layers[l].leftCols(layers[l].cols() - 1);
    }
    [[nodiscard]] Matrix::ConstColsBlockXpr weights(std::size_t l) const {
        return layers[l].leftCols(layers[l].cols() - 1);
    }
    [[nodiscard]] Matrix::ColXpr bias(std::size_t l) { return layers[l].col(layers[l].cols() - 1); }
    [[nodiscard]] Matrix::ConstColXpr bias(std::size_t l) const { return layers[l].col(layers[l].cols() - 1); }

    static WeightUtility zeros_like(const Network& net);
};

/// Per-feature utilities, one vector per hidden layer.
struct FeatureUtility {
    std::vector<Vector> layers;

    static FeatureUtility zeros_like(const Network& net);
};

enum class Order { first, second };
enum class UtilityKind { true_ablation, second_order, first_order, weight_magnitude, random };
enum class Squash { sigmoid, tanh };
enum class Scaling { global, layerwise };

[[nodiscard]] std::string to_string(UtilityKind kind);
[[nodiscard]] UtilityKind parse_utility_kind(std::string_view name);
[[nodiscard]] std::string to_string(Squash squash);
[[nodiscard]] Squash parse_squash(std::string_view name);
[[nodiscard]] std::string to_string(Scaling scaling);
[[nodiscard]] Scaling parse_scaling(std::string_view name);

[[nodiscard]] inline double squash(Squash phi, double x) {
    if (phi == Squash::tanh) {
        return std::tanh(x);
    }
    // exp overflow is slow in libm; the sigmoid is below 1e-300 there anyway.
    return x < -690.0 ? 0.0 : 1.0 / (1.0 + std::exp(-x));
}

/// Loss change from zeroing each weight and bias in turn (one forward pass per
/// parameter plus the baseline).
[[nodiscard]] WeightUtility true_weight_utility(const Network& net, const Matrix& inputs, const Matrix& targets);

/// Loss change from masking each hidden feature in turn.
[[nodiscard]] FeatureUtility true_feature_utility(const Network& net, const Matrix& inputs, const Matrix& targets);

/// Taylor estimate of the weight ablation: -F o W, plus 1/2 S o W^2 for the
/// second order.
[[nodiscard]] WeightUtility approx_weight_utility(const BackwardTrace& bwd, const Network& net, Order order);

/// Taylor estimate of the feature ablation from mask derivatives: -f (+ 1/2 s).
[[nodiscard]] FeatureUtility approx_feature_utility(const BackwardTrace& bwd, Order order);

enum class Baseline { weight_magnitude, random };

/// |W| entrywise, or i.i.d. U(0,1) scores drawn from `rng` on every call.
[[nodiscard]] WeightUtility baseline_utility(Baseline kind, const Network& net, std::mt19937_64& rng);
/// Random feature scores, used as the reference column of the feature probe.
[[nodiscard]] FeatureUtility random_feature_utility(const Network& net, std::mt19937_64& rng);

/// Second-order weight utility obtained by propagating first- and
/// second-order Taylor terms from the output layer downwards. Biases are not
/// part of the recursion; the result holds weights only ([out x in]).
///
/// The recursion divides by hidden activations; any |h| <= 1e-8 raises
/// NearZeroDenominator, in which case callers use approx_weight_utility.
[[nodiscard]] std::vector<Matrix> propagate_utility(const Network& net, const ForwardTrace& fwd,
                                                    const BackwardTrace& bwd);

inline constexpr double kPropagationGuard = 1e-8;

/// Exponential moving average of utilities with bias correction.
template <class U>
class UtilityTrace {
public:
    explicit UtilityTrace(double beta = 0.0);

    /// ema <- beta * ema + (1 - beta) * instantaneous; t <- t + 1.
    void update(const U& instantaneous);

    /// ema / (1 - beta^t). Equals the latest instantaneous value when beta is 0.
    [[nodiscard]] U corrected() const;

    [[nodiscard]] const U& ema() const { return ema_; }
    [[nodiscard]] std::int64_t step() const { return step_; }
    [[nodiscard]] double beta() const { return beta_; }

private:
    U ema_;
    std::int64_t step_ = 0;
    double beta_;
};

template <class U>
struct ScaledUtility {
    U values;
    Scaling scaling = Scaling::global;
    Squash phi = Squash::sigmoid;
    double eta = 0.0;  // meaningful for global scaling only
};

inline constexpr double kEtaGuard = 1e-12;

/// phi(U / eta) / phi(1) clamped to [0, 1], eta the maximum over every entry.
[[nodiscard]] ScaledUtility<WeightUtility> scale_global(const WeightUtility& u, Squash phi);
[[nodiscard]] ScaledUtility<FeatureUtility> scale_global(const FeatureUtility& u, Squash phi);

/// Same mapping with a caller-provided eta (running-max mode).
[[nodiscard]] ScaledUtility<WeightUtility> scale_global(const WeightUtility& u, Squash phi, double eta);
[[nodiscard]] ScaledUtility<FeatureUtility> scale_global(const FeatureUtility& u, Squash phi, double eta);

/// Largest entry across all layers.
[[nodiscard]] double max_entry(const WeightUtility& u);
[[nodiscard]] double max_entry(const FeatureUtility& u);

/// Rows (weights) or whole vectors (features) normalised by their Euclidean
/// norm, then squashed. Zero-norm rows map to phi(0).
[[nodiscard]] ScaledUtility<WeightUtility> scale_layerwise(const WeightUtility& u, Squash phi);
[[nodiscard]] ScaledUtility<FeatureUtility> scale_layerwise(const FeatureUtility& u, Squash phi);

}  // namespace upgd
