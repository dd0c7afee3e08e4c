#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace upgd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Hidden-layer nonlinearity together with its first two derivatives.
///
/// The second derivative of relu and leaky_relu is taken as zero everywhere,
/// including at the kink; their first derivative at 0 is the left slope.
struct Activation {
    enum class Kind { identity, tanh, relu, leaky_relu };

    Kind kind = Kind::identity;
    double slope = 0.01;  // leaky_relu only

    static Activation identity() { return {Kind::identity}; }
    static Activation tanh() { return {Kind::tanh}; }
    static Activation relu() { return {Kind::relu}; }
    static Activation leaky_relu(double slope = 0.01) { return {Kind::leaky_relu, slope}; }

    [[nodiscard]] double value(double a) const;
    [[nodiscard]] double first(double a) const;
    [[nodiscard]] double second(double a) const;

    /// True for activations with sigma(a) == sigma'(a) * a.
    [[nodiscard]] bool homogeneous() const { return kind != Kind::tanh; }

    [[nodiscard]] std::string name() const;
    static Activation parse(std::string_view name);

    friend bool operator==(const Activation&, const Activation&) = default;
};

/// Loss attached to the output layer. Softmax lives here, not in Activation.
enum class Loss { mse, softmax_cross_entropy };

[[nodiscard]] std::string to_string(Loss loss);
[[nodiscard]] Loss parse_loss(std::string_view name);

struct Layer {
    Matrix weight;  // [out x in]
    Vector bias;    // [out]
};

struct Network {
    std::vector<Layer> layers;
    std::vector<Activation> activations;  // one per hidden layer
    Loss loss = Loss::mse;

    [[nodiscard]] std::size_t depth() const { return layers.size(); }
    [[nodiscard]] std::size_t input_size() const { return layers.front().weight.cols(); }
    [[nodiscard]] std::size_t output_size() const { return layers.back().weight.rows(); }
    [[nodiscard]] std::vector<std::size_t> hidden_sizes() const;
    [[nodiscard]] std::size_t parameter_count() const;

    /// Checks chain compatibility and finiteness; throws on violation.
    void validate() const;
};

/// Kaiming-normal weights (std sqrt(2 / fan_in)), zero biases.
[[nodiscard]] Network build_network(std::span<const std::size_t> layer_sizes, Activation activation,
                                    Loss loss, std::uint64_t seed);

/// Per-hidden-layer feature masks. An empty list means all ones.
using Masks = std::vector<Vector>;

struct ForwardTrace {
    Matrix input;                   // h_0, [batch x in]
    std::vector<Matrix> pre;        // a_l for every layer, [batch x out_l]
    std::vector<Matrix> activated;  // sigma(a_l) before masking, hidden layers
    std::vector<Matrix> hidden;     // h_l = m_l o sigma(a_l), hidden layers
    Masks masks;                    // always materialised, hidden layers
    Matrix prediction;              // a_L for mse, softmax(a_L) for cross entropy
    Vector sample_loss;             // [batch]
    double loss = 0.0;              // batch mean

    [[nodiscard]] std::size_t batch_size() const { return input.rows(); }
    /// Input to layer `l` (0-based): x for l == 0, hidden[l-1] otherwise.
    [[nodiscard]] const Matrix& layer_input(std::size_t l) const {
        return l == 0 ? input : hidden[l - 1];
    }
};

/// Targets are [batch x out]; for cross entropy each row is a one-hot (or any
/// probability) vector.
[[nodiscard]] ForwardTrace forward(const Network& net, const Matrix& inputs, const Matrix& targets,
                                   const Masks& masks = {});

/// Batch-mean loss only. Used by ablation sweeps and finite differences.
[[nodiscard]] double evaluate_loss(const Network& net, const Matrix& inputs, const Matrix& targets,
                                   const Masks& masks = {});

struct LayerDerivatives {
    Matrix weight_grad;   // dL/dW
    Matrix weight_curv;   // approximate diag d2L/dW2
    Vector bias_grad;
    Vector bias_curv;
    Vector act_grad;      // dL/da, batch mean
    Vector act_curv;      // approximate diag d2L/da2, batch mean
    Matrix sample_act_grad;  // per-sample dl_n/da, [batch x out]
    Matrix sample_act_curv;  // per-sample approximate diag, [batch x out]
};

/// Gradients and diagonal curvature from one backward sweep. Every field is
/// the mean of the per-sample quantity over the batch.
struct BackwardTrace {
    std::vector<LayerDerivatives> layers;
    std::vector<Vector> mask_grad;  // dL/dm_l at the forward masks, hidden layers
    std::vector<Vector> mask_curv;  // approximate diag d2L/dm_l^2
    bool has_curvature = true;
};

/// With `curvature` false only first derivatives are computed and every
/// curvature field is left empty.
[[nodiscard]] BackwardTrace backward(const Network& net, const ForwardTrace& trace,
                                     const Matrix& targets, bool curvature = true);

}  // namespace upgd
