#pragma once

#include "upgd/nn.hpp"
#include "upgd/utility.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace upgd::testing {

inline const std::vector<Activation>& all_activations() {
    static const std::vector<Activation> acts{Activation::identity(), Activation::tanh(), Activation::relu(),
                                              Activation::leaky_relu()};
    return acts;
}

inline Matrix uniform_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                             double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            m(i, j) = u(rng);
        }
    }
    return m;
}

/// One-hot rows for cross entropy, uniform values for mse.
inline Matrix random_targets(std::mt19937_64& rng, Loss loss, Eigen::Index batch, Eigen::Index outputs) {
    if (loss == Loss::mse) {
        return uniform_matrix(rng, batch, outputs);
    }
    Matrix y = Matrix::Zero(batch, outputs);
    std::uniform_int_distribution<Eigen::Index> pick(0, outputs - 1);
    for (Eigen::Index n = 0; n < batch; ++n) {
        y(n, pick(rng)) = 1.0;
    }
    return y;
}

/// Kaiming network with small random biases so bias paths are exercised.
inline Network random_network(std::mt19937_64& rng, const std::vector<std::size_t>& sizes, Activation act, Loss loss,
                              bool with_bias = true) {
    Network net = build_network(sizes, act, loss, rng());
    if (with_bias) {
        for (auto& layer : net.layers) {
            layer.bias = uniform_matrix(rng, layer.bias.size(), 1, -0.5, 0.5);
        }
    }
    return net;
}

inline std::vector<std::size_t> random_sizes(std::mt19937_64& rng, std::size_t max_width, std::size_t max_layers) {
    std::uniform_int_distribution<std::size_t> width(1, max_width);
    std::uniform_int_distribution<std::size_t> layers(1, max_layers);
    std::vector<std::size_t> sizes{width(rng)};
    const auto n = layers(rng);
    for (std::size_t l = 0; l < n; ++l) {
        sizes.push_back(width(rng));
    }
    return sizes;
}

/// Smallest |a| over hidden pre-activations; piecewise-linear activations
/// need a margin from the kink before finite differences are meaningful.
inline double kink_margin(const ForwardTrace& fwd) {
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < fwd.pre.size(); ++l) {
        margin = std::min(margin, fwd.pre[l].cwiseAbs().minCoeff());
    }
    return margin;
}

/// Richardson-extrapolated central difference of f at 0.
inline double derivative(const std::function<double(double)>& f, double h) {
    const double d1 = (f(h) - f(-h)) / (2.0 * h);
    const double d2 = (f(h / 2) - f(-h / 2)) / h;
    return (4.0 * d2 - d1) / 3.0;
}

/// Richardson-extrapolated second difference of f at 0.
inline double second_derivative(const std::function<double(double)>& f, double h) {
    const double f0 = f(0.0);
    const double s1 = (f(h) - 2.0 * f0 + f(-h)) / (h * h);
    const double s2 = (f(h / 2) - 2.0 * f0 + f(-h / 2)) / (h * h / 4);
    return (4.0 * s2 - s1) / 3.0;
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-12) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            worst = std::max(worst, relative_error(a(i, j), b(i, j), floor));
        }
    }
    return worst;
}

/// Width-1 chain x -> w_1 -> ... -> w_L -> y without biases.
inline Network chain(const std::vector<double>& weights, Activation act, Loss loss = Loss::mse) {
    Network net;
    net.loss = loss;
    for (double w : weights) {
        net.layers.push_back({Matrix::Constant(1, 1, w), Vector::Zero(1)});
    }
    net.activations.assign(weights.size() - 1, act);
    return net;
}

/// Loss as a function of one parameter offset: layer l, row i, column j
/// (column == in selects the bias).
inline std::function<double(double)> parameter_path(const Network& net, const Matrix& x, const Matrix& y,
                                                    std::size_t l, Eigen::Index i, Eigen::Index j) {
    return [&net, &x, &y, l, i, j](double t) {
        Network probe = net;
        auto& layer = probe.layers[l];
        if (j == layer.weight.cols()) {
            layer.bias(i) += t;
        } else {
            layer.weight(i, j) += t;
        }
        return evaluate_loss(probe, x, y);
    };
}

struct GradientCheck {
    double max_relative = 0.0;
    double max_absolute = 0.0;
};

/// Backward gradients of every weight and bias against Richardson central
/// differences. Relative errors use denominators floored at `floor`.
inline GradientCheck gradient_check(const Network& net, const Matrix& x, const Matrix& y, double floor,
                                    double h = 1e-3) {
    const auto fwd = forward(net, x, y);
    const auto bwd = backward(net, fwd, y);
    GradientCheck out;
    for (std::size_t l = 0; l < net.depth(); ++l) {
        const auto& w = net.layers[l].weight;
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            for (Eigen::Index j = 0; j <= w.cols(); ++j) {
                const double analytic = j == w.cols() ? bwd.layers[l].bias_grad(i) : bwd.layers[l].weight_grad(i, j);
                const double numeric = derivative(parameter_path(net, x, y, l, i, j), h);
                out.max_relative = std::max(out.max_relative, relative_error(analytic, numeric, floor));
                out.max_absolute = std::max(out.max_absolute, std::abs(analytic - numeric));
            }
        }
    }
    return out;
}

}  // namespace upgd::testing
