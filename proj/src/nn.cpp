#include "upgd/nn.hpp"

#include "upgd/errors.hpp"

#include <cmath>
#include <random>

namespace upgd {

double Activation::value(double a) const {
    switch (kind) {
        case Kind::identity: return a;
        case Kind::tanh: return std::tanh(a);
        case Kind::relu: return a > 0.0 ? a : 0.0;
        case Kind::leaky_relu: return a > 0.0 ? a : slope * a;
    }
    return a;
}

double Activation::first(double a) const {
    switch (kind) {
        case Kind::identity: return 1.0;
        case Kind::tanh: {
            const double t = std::tanh(a);
            return 1.0 - t * t;
        }
        case Kind::relu: return a > 0.0 ? 1.0 : 0.0;
        case Kind::leaky_relu: return a > 0.0 ? 1.0 : slope;
    }
    return 1.0;
}

double Activation::second(double a) const {
    if (kind != Kind::tanh) {
        return 0.0;
    }
    const double t = std::tanh(a);
    return -2.0 * t * (1.0 - t * t);
}

std::string Activation::name() const {
    switch (kind) {
        case Kind::identity: return "identity";
        case Kind::tanh: return "tanh";
        case Kind::relu: return "relu";
        case Kind::leaky_relu: return "leaky_relu";
    }
    return "identity";
}

Activation Activation::parse(std::string_view name) {
    if (name == "identity" || name == "linear") return identity();
    if (name == "tanh") return tanh();
    if (name == "relu") return relu();
    if (name == "leaky_relu") return leaky_relu();
    throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

std::string to_string(Loss loss) {
    return loss == Loss::mse ? "mse" : "softmax_cross_entropy";
}

Loss parse_loss(std::string_view name) {
    if (name == "mse") return Loss::mse;
    if (name == "softmax_cross_entropy" || name == "cross_entropy") return Loss::softmax_cross_entropy;
    throw InvalidArgument("unknown loss '" + std::string(name) + "'");
}

std::vector<std::size_t> Network::hidden_sizes() const {
    std::vector<std::size_t> sizes;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
        sizes.push_back(layers[l].weight.rows());
    }
    return sizes;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) {
        n += layer.weight.size() + layer.bias.size();
    }
    return n;
}

void Network::validate() const {
    if (layers.empty()) {
        throw DimensionMismatch("network has no layers");
    }
    if (activations.size() + 1 != layers.size()) {
        throw DimensionMismatch("need one activation per hidden layer");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        if (layer.bias.size() != layer.weight.rows()) {
            throw DimensionMismatch("bias length differs from layer width at layer " + std::to_string(l));
        }
        if (l > 0 && layer.weight.cols() != layers[l - 1].weight.rows()) {
            throw DimensionMismatch("layer " + std::to_string(l) + " is not chain-compatible");
        }
        if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
            throw NonFinite("non-finite parameter in layer " + std::to_string(l));
        }
    }
}

Network build_network(std::span<const std::size_t> layer_sizes, Activation activation, Loss loss,
                      std::uint64_t seed) {
    if (layer_sizes.size() < 2) {
        throw InvalidArgument("a network needs at least an input and an output size");
    }
    for (auto s : layer_sizes) {
        if (s == 0) {
            throw InvalidArgument("layer sizes must be positive");
        }
    }

    std::mt19937_64 rng(seed);
    Network net;
    net.loss = loss;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const auto fan_in = layer_sizes[l];
        const auto fan_out = layer_sizes[l + 1];
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        Layer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
                layer.weight(i, j) = normal(rng);
            }
        }
        net.layers.push_back(std::move(layer));
    }
    net.activations.assign(net.layers.size() - 1, activation);
    return net;
}

namespace {

void check_inputs(const Network& net, const Matrix& inputs, const Matrix& targets, const Masks& masks) {
    if (static_cast<std::size_t>(inputs.cols()) != net.input_size()) {
        throw DimensionMismatch("input width " + std::to_string(inputs.cols()) + " != network input " +
                                std::to_string(net.input_size()));
    }
    if (targets.rows() != inputs.rows() ||
        static_cast<std::size_t>(targets.cols()) != net.output_size()) {
        throw DimensionMismatch("targets must be [batch x output]");
    }
    if (inputs.rows() == 0) {
        throw DimensionMismatch("empty batch");
    }
    if (!inputs.allFinite() || !targets.allFinite()) {
        throw NonFinite("non-finite input or target");
    }
    if (!masks.empty()) {
        const auto hidden = net.hidden_sizes();
        if (masks.size() != hidden.size()) {
            throw DimensionMismatch("one mask per hidden layer required");
        }
        for (std::size_t l = 0; l < hidden.size(); ++l) {
            if (static_cast<std::size_t>(masks[l].size()) != hidden[l]) {
                throw DimensionMismatch("mask length differs from hidden width at layer " + std::to_string(l));
            }
        }
    }
}

Matrix apply(const Activation& act, const Matrix& a) {
    return a.unaryExpr([&act](double v) { return act.value(v); });
}

Matrix affine(const Layer& layer, const Matrix& h) {
    Matrix a = h * layer.weight.transpose();
    a.rowwise() += layer.bias.transpose();
    return a;
}

// Writes predictions and per-sample losses for output activation inputs.
void output_loss(Loss loss, const Matrix& out, const Matrix& targets, Matrix& prediction, Vector& sample_loss) {
    const auto m = static_cast<double>(out.cols());
    if (loss == Loss::mse) {
        prediction = out;
        sample_loss = (out - targets).array().square().rowwise().sum() / m;
        return;
    }
    prediction.resize(out.rows(), out.cols());
    sample_loss.resize(out.rows());
    for (Eigen::Index n = 0; n < out.rows(); ++n) {
        const double shift = out.row(n).maxCoeff();
        const Eigen::RowVectorXd e = (out.row(n).array() - shift).exp();
        const double z = e.sum();
        prediction.row(n) = e / z;
        const Eigen::RowVectorXd log_p = out.row(n).array() - shift - std::log(z);
        sample_loss(n) = -(targets.row(n).array() * log_p.array()).sum();
    }
}

}  // namespace

ForwardTrace forward(const Network& net, const Matrix& inputs, const Matrix& targets, const Masks& masks) {
    check_inputs(net, inputs, targets, masks);
    ForwardTrace trace;
    trace.input = inputs;
    const auto depth = net.depth();
    trace.pre.reserve(depth);
    for (std::size_t l = 0; l < depth; ++l) {
        trace.pre.push_back(affine(net.layers[l], trace.layer_input(l)));
        if (l + 1 == depth) {
            break;
        }
        trace.activated.push_back(apply(net.activations[l], trace.pre.back()));
        Vector mask = masks.empty() ? Vector::Ones(trace.pre.back().cols()) : masks[l];
        Matrix h = trace.activated.back();
        if (!masks.empty()) {
            h.array().rowwise() *= mask.transpose().array();
        }
        trace.hidden.push_back(std::move(h));
        trace.masks.push_back(std::move(mask));
    }
    output_loss(net.loss, trace.pre.back(), targets, trace.prediction, trace.sample_loss);
    trace.loss = trace.sample_loss.mean();
    return trace;
}

double evaluate_loss(const Network& net, const Matrix& inputs, const Matrix& targets, const Masks& masks) {
    check_inputs(net, inputs, targets, masks);
    Matrix h = inputs;
    for (std::size_t l = 0; l < net.depth(); ++l) {
        Matrix a = affine(net.layers[l], h);
        if (l + 1 == net.depth()) {
            h = std::move(a);
            break;
        }
        h = apply(net.activations[l], a);
        if (!masks.empty()) {
            h.array().rowwise() *= masks[l].transpose().array();
        }
    }
    Matrix prediction;
    Vector sample_loss;
    output_loss(net.loss, h, targets, prediction, sample_loss);
    return sample_loss.mean();
}

BackwardTrace backward(const Network& net, const ForwardTrace& trace, const Matrix& targets, bool curvature) {
    const auto depth = net.depth();
    if (trace.pre.size() != depth || trace.hidden.size() + 1 != depth) {
        throw DimensionMismatch("trace does not belong to this network");
    }
    for (std::size_t l = 0; l < depth; ++l) {
        if (trace.pre[l].cols() != net.layers[l].weight.rows() ||
            trace.layer_input(l).cols() != net.layers[l].weight.cols()) {
            throw DimensionMismatch("trace does not belong to this network (layer " + std::to_string(l) + ")");
        }
    }
    if (targets.rows() != trace.prediction.rows() || targets.cols() != trace.prediction.cols()) {
        throw DimensionMismatch("targets must match the traced prediction");
    }

    const auto batch = static_cast<double>(trace.batch_size());
    const auto outputs = static_cast<double>(net.output_size());

    // Exact output-layer derivatives of the per-sample loss.
    Matrix grad;
    Matrix curv;
    if (net.loss == Loss::mse) {
        grad = (2.0 / outputs) * (trace.prediction - targets);
        if (curvature) {
            curv = Matrix::Constant(grad.rows(), grad.cols(), 2.0 / outputs);
        }
    } else {
        grad = trace.prediction - targets;
        if (curvature) {
            curv = trace.prediction.array() * (1.0 - trace.prediction.array());
        }
    }

    BackwardTrace out;
    out.has_curvature = curvature;
    out.layers.resize(depth);
    out.mask_grad.resize(depth - 1);
    out.mask_curv.resize(depth - 1);

    for (std::size_t l = depth; l-- > 0;) {
        const auto& weight = net.layers[l].weight;
        const Matrix& input = trace.layer_input(l);
        auto& d = out.layers[l];
        d.weight_grad.noalias() = grad.transpose() * input;
        d.weight_grad /= batch;
        d.bias_grad = grad.colwise().mean().transpose();
        d.act_grad = d.bias_grad;
        if (curvature) {
            d.weight_curv.noalias() = curv.transpose() * input.array().square().matrix();
            d.weight_curv /= batch;
            d.bias_curv = curv.colwise().mean().transpose();
            d.act_curv = d.bias_curv;
        }

        if (l > 0) {
            // Derivatives with respect to the masked features h_bar = m o sigma(a).
            Matrix grad_h;
            grad_h.noalias() = grad * weight;
            const Matrix& sig = trace.activated[l - 1];
            const Vector& mask = trace.masks[l - 1];
            const auto& act = net.activations[l - 1];
            const Matrix& a = trace.pre[l - 1];

            out.mask_grad[l - 1] = grad_h.cwiseProduct(sig).colwise().mean().transpose();

            Matrix next_grad(grad_h.rows(), grad_h.cols());
            Matrix next_curv;
            if (curvature) {
                Matrix curv_h;
                curv_h.noalias() = curv * weight.array().square().matrix();
                out.mask_curv[l - 1] = curv_h.cwiseProduct(sig.cwiseProduct(sig)).colwise().mean().transpose();
                next_curv.resize(grad_h.rows(), grad_h.cols());
                for (Eigen::Index j = 0; j < a.cols(); ++j) {
                    const double m = mask(j);
                    for (Eigen::Index n = 0; n < a.rows(); ++n) {
                        const double d1 = m * act.first(a(n, j));
                        const double d2 = m * act.second(a(n, j));
                        next_grad(n, j) = grad_h(n, j) * d1;
                        next_curv(n, j) = curv_h(n, j) * d1 * d1 + grad_h(n, j) * d2;
                    }
                }
            } else {
                for (Eigen::Index j = 0; j < a.cols(); ++j) {
                    const double m = mask(j);
                    for (Eigen::Index n = 0; n < a.rows(); ++n) {
                        next_grad(n, j) = grad_h(n, j) * m * act.first(a(n, j));
                    }
                }
            }
            d.sample_act_grad = std::move(grad);
            d.sample_act_curv = std::move(curv);
            grad = std::move(next_grad);
            curv = std::move(next_curv);
        } else {
            d.sample_act_grad = std::move(grad);
            d.sample_act_curv = std::move(curv);
        }
    }
    return out;
}

}  // namespace upgd
