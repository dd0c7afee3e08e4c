#include "upgd/utility.hpp"

#include "upgd/errors.hpp"

#include <algorithm>
#include <limits>

namespace upgd {

WeightUtility WeightUtility::zeros_like(const Network& net) {
    WeightUtility u;
    for (const auto& layer : net.layers) {
        u.layers.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols() + 1));
    }
    return u;
}

FeatureUtility FeatureUtility::zeros_like(const Network& net) {
    FeatureUtility u;
    for (auto width : net.hidden_sizes()) {
        u.layers.push_back(Vector::Zero(static_cast<Eigen::Index>(width)));
    }
    return u;
}

std::string to_string(UtilityKind kind) {
    switch (kind) {
        case UtilityKind::true_ablation: return "true";
        case UtilityKind::second_order: return "second_order";
        case UtilityKind::first_order: return "first_order";
        case UtilityKind::weight_magnitude: return "weight_magnitude";
        case UtilityKind::random: return "random";
    }
    return "second_order";
}

UtilityKind parse_utility_kind(std::string_view name) {
    if (name == "true" || name == "true_ablation") return UtilityKind::true_ablation;
    if (name == "second_order" || name == "second") return UtilityKind::second_order;
    if (name == "first_order" || name == "first") return UtilityKind::first_order;
    if (name == "weight_magnitude" || name == "magnitude") return UtilityKind::weight_magnitude;
    if (name == "random") return UtilityKind::random;
    throw InvalidArgument("unknown utility kind '" + std::string(name) + "'");
}

std::string to_string(Squash squash) { return squash == Squash::sigmoid ? "sigmoid" : "tanh"; }

Squash parse_squash(std::string_view name) {
    if (name == "sigmoid") return Squash::sigmoid;
    if (name == "tanh") return Squash::tanh;
    throw InvalidArgument("unknown squash '" + std::string(name) + "'");
}

std::string to_string(Scaling scaling) { return scaling == Scaling::global ? "global" : "layerwise"; }

Scaling parse_scaling(std::string_view name) {
    if (name == "global") return Scaling::global;
    if (name == "layerwise" || name == "layer_wise") return Scaling::layerwise;
    throw InvalidArgument("unknown scaling '" + std::string(name) + "'");
}

WeightUtility true_weight_utility(const Network& net, const Matrix& inputs, const Matrix& targets) {
    const double base = evaluate_loss(net, inputs, targets);
    Network ablated = net;
    auto u = WeightUtility::zeros_like(net);
    for (std::size_t l = 0; l < net.depth(); ++l) {
        auto& layer = ablated.layers[l];
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
                const double keep = layer.weight(i, j);
                layer.weight(i, j) = 0.0;
                u.layers[l](i, j) = evaluate_loss(ablated, inputs, targets) - base;
                layer.weight(i, j) = keep;
            }
            const double keep = layer.bias(i);
            layer.bias(i) = 0.0;
            u.bias(l)(i) = evaluate_loss(ablated, inputs, targets) - base;
            layer.bias(i) = keep;
        }
    }
    return u;
}

FeatureUtility true_feature_utility(const Network& net, const Matrix& inputs, const Matrix& targets) {
    const double base = evaluate_loss(net, inputs, targets);
    auto u = FeatureUtility::zeros_like(net);
    Masks masks;
    for (const auto& v : u.layers) {
        masks.push_back(Vector::Ones(v.size()));
    }
    for (std::size_t l = 0; l < masks.size(); ++l) {
        for (Eigen::Index j = 0; j < masks[l].size(); ++j) {
            masks[l](j) = 0.0;
            u.layers[l](j) = evaluate_loss(net, inputs, targets, masks) - base;
            masks[l](j) = 1.0;
        }
    }
    return u;
}

WeightUtility approx_weight_utility(const BackwardTrace& bwd, const Network& net, Order order) {
    if (bwd.layers.size() != net.depth()) {
        throw DimensionMismatch("backward trace does not belong to this network");
    }
    if (order == Order::second && !bwd.has_curvature) {
        throw InvalidArgument("second-order utility needs a backward pass with curvature");
    }
    auto u = WeightUtility::zeros_like(net);
    for (std::size_t l = 0; l < net.depth(); ++l) {
        const auto& w = net.layers[l].weight;
        const auto& b = net.layers[l].bias;
        const auto& d = bwd.layers[l];
        u.weights(l) = -d.weight_grad.cwiseProduct(w);
        u.bias(l) = -d.bias_grad.cwiseProduct(b);
        if (order == Order::second) {
            u.weights(l) += 0.5 * d.weight_curv.cwiseProduct(w.cwiseProduct(w));
            u.bias(l) += 0.5 * d.bias_curv.cwiseProduct(b.cwiseProduct(b));
        }
    }
    return u;
}

FeatureUtility approx_feature_utility(const BackwardTrace& bwd, Order order) {
    if (order == Order::second && !bwd.has_curvature) {
        throw InvalidArgument("second-order utility needs a backward pass with curvature");
    }
    FeatureUtility u;
    for (std::size_t l = 0; l < bwd.mask_grad.size(); ++l) {
        Vector v = -bwd.mask_grad[l];
        if (order == Order::second) {
            v += 0.5 * bwd.mask_curv[l];
        }
        u.layers.push_back(std::move(v));
    }
    return u;
}

WeightUtility baseline_utility(Baseline kind, const Network& net, std::mt19937_64& rng) {
    auto u = WeightUtility::zeros_like(net);
    if (kind == Baseline::weight_magnitude) {
        for (std::size_t l = 0; l < net.depth(); ++l) {
            u.weights(l) = net.layers[l].weight.cwiseAbs();
            u.bias(l) = net.layers[l].bias.cwiseAbs();
        }
        return u;
    }
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (auto& m : u.layers) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                m(i, j) = uniform(rng);
            }
        }
    }
    return u;
}

FeatureUtility random_feature_utility(const Network& net, std::mt19937_64& rng) {
    auto u = FeatureUtility::zeros_like(net);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (auto& v : u.layers) {
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            v(j) = uniform(rng);
        }
    }
    return u;
}

std::vector<Matrix> propagate_utility(const Network& net, const ForwardTrace& fwd, const BackwardTrace& bwd) {
    const auto depth = net.depth();
    if (bwd.layers.size() != depth || fwd.pre.size() != depth) {
        throw DimensionMismatch("traces do not belong to this network");
    }
    if (!bwd.has_curvature) {
        throw InvalidArgument("utility propagation needs a backward pass with curvature");
    }
    const auto batch = static_cast<Eigen::Index>(fwd.batch_size());

    std::vector<Matrix> total;
    for (const auto& layer : net.layers) {
        total.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
    }

    // first[l], second[l]: per-sample first- and second-order Taylor terms of layer l.
    std::vector<Matrix> first(depth);
    std::vector<Matrix> second(depth);
    for (Eigen::Index n = 0; n < batch; ++n) {
        const auto top = depth - 1;
        {
            const auto& w = net.layers[top].weight;
            const Vector h_in = fwd.layer_input(top).row(n).transpose();
            const Vector g = bwd.layers[top].sample_act_grad.row(n).transpose();
            const Vector c = bwd.layers[top].sample_act_curv.row(n).transpose();
            first[top] = -(g * h_in.transpose()).cwiseProduct(w);
            second[top] = 0.5 * (c * h_in.cwiseProduct(h_in).transpose()).cwiseProduct(w.cwiseProduct(w));
        }
        for (std::size_t l = top; l-- > 0;) {
            const auto& w = net.layers[l].weight;
            const auto& act = net.activations[l];
            const Vector first_out = first[l + 1].colwise().sum().transpose();
            const Vector second_out = second[l + 1].colwise().sum().transpose();
            const auto width = w.rows();
            Vector g(width);
            Vector c(width);
            for (Eigen::Index i = 0; i < width; ++i) {
                const double h = fwd.hidden[l](n, i);
                if (!(std::abs(h) > kPropagationGuard)) {
                    throw NearZeroDenominator(l, static_cast<std::size_t>(i), h);
                }
                // Sum over outgoing weights of dL/da_{l+1,k} W_{k,i}, and of the
                // curvature analogue, recovered from the outgoing utility terms.
                const double grad_out = -first_out(i) / h;
                const double curv_out = 2.0 * second_out(i) / (h * h);
                const double a = fwd.pre[l](n, i);
                const double m = fwd.masks[l](i);
                const double d1 = m * act.first(a);
                const double d2 = m * act.second(a);
                g(i) = grad_out * d1;
                c(i) = curv_out * d1 * d1 + grad_out * d2;
            }
            const Vector h_in = fwd.layer_input(l).row(n).transpose();
            first[l] = -(g * h_in.transpose()).cwiseProduct(w);
            second[l] = 0.5 * (c * h_in.cwiseProduct(h_in).transpose()).cwiseProduct(w.cwiseProduct(w));
        }
        for (std::size_t l = 0; l < depth; ++l) {
            total[l] += first[l] + second[l];
        }
    }
    for (auto& m : total) {
        m /= static_cast<double>(batch);
    }
    return total;
}

template <class U>
UtilityTrace<U>::UtilityTrace(double beta) : beta_(beta) {
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw InvalidArgument("utility decay must lie in [0, 1)");
    }
}

template <class U>
void UtilityTrace<U>::update(const U& instantaneous) {
    if (step_ == 0) {
        ema_ = instantaneous;
        for (auto& layer : ema_.layers) {
            layer.setZero();
        }
    }
    if (ema_.layers.size() != instantaneous.layers.size()) {
        throw DimensionMismatch("utility shape changed between updates");
    }
    for (std::size_t l = 0; l < ema_.layers.size(); ++l) {
        if (ema_.layers[l].size() != instantaneous.layers[l].size()) {
            throw DimensionMismatch("utility shape changed between updates");
        }
        if (beta_ == 0.0) {
            ema_.layers[l] = instantaneous.layers[l];
        } else {
            ema_.layers[l] = beta_ * ema_.layers[l] + (1.0 - beta_) * instantaneous.layers[l];
        }
    }
    ++step_;
}

template <class U>
U UtilityTrace<U>::corrected() const {
    U out = ema_;
    if (beta_ == 0.0 || step_ == 0) {
        return out;
    }
    const double correction = 1.0 - std::pow(beta_, static_cast<double>(step_));
    for (auto& layer : out.layers) {
        layer /= correction;
    }
    return out;
}

template class UtilityTrace<WeightUtility>;
template class UtilityTrace<FeatureUtility>;

namespace {

template <class U>
double max_of(const U& u) {
    double eta = -std::numeric_limits<double>::infinity();
    for (const auto& layer : u.layers) {
        if (layer.size() > 0) {
            eta = std::max(eta, layer.maxCoeff());
        }
    }
    return eta;
}

template <class U>
ScaledUtility<U> global_impl(const U& u, Squash phi, double eta) {
    ScaledUtility<U> out{u, Scaling::global, phi, eta};
    const double norm = squash(phi, 1.0);
    if (!(std::abs(eta) >= kEtaGuard)) {
        const double flat = std::clamp(squash(phi, 0.0) / norm, 0.0, 1.0);
        for (auto& layer : out.values.layers) {
            layer.setConstant(flat);
        }
        return out;
    }
    for (auto& layer : out.values.layers) {
        double* v = layer.data();
        for (Eigen::Index k = 0; k < layer.size(); ++k) {
            v[k] = std::clamp(squash(phi, v[k] / eta) / norm, 0.0, 1.0);
        }
    }
    return out;
}

Vector squash_unit(const Eigen::Ref<const Eigen::RowVectorXd>& row, Squash phi) {
    const double norm = row.norm();
    Vector out(row.size());
    for (Eigen::Index j = 0; j < row.size(); ++j) {
        out(j) = norm > 0.0 ? squash(phi, row(j) / norm) : squash(phi, 0.0);
    }
    return out;
}

}  // namespace

double max_entry(const WeightUtility& u) { return max_of(u); }
double max_entry(const FeatureUtility& u) { return max_of(u); }

ScaledUtility<WeightUtility> scale_global(const WeightUtility& u, Squash phi) {
    return global_impl(u, phi, max_of(u));
}

ScaledUtility<FeatureUtility> scale_global(const FeatureUtility& u, Squash phi) {
    return global_impl(u, phi, max_of(u));
}

ScaledUtility<WeightUtility> scale_global(const WeightUtility& u, Squash phi, double eta) {
    return global_impl(u, phi, eta);
}

ScaledUtility<FeatureUtility> scale_global(const FeatureUtility& u, Squash phi, double eta) {
    return global_impl(u, phi, eta);
}

ScaledUtility<WeightUtility> scale_layerwise(const WeightUtility& u, Squash phi) {
    ScaledUtility<WeightUtility> out{u, Scaling::layerwise, phi, 0.0};
    for (auto& layer : out.values.layers) {
        for (Eigen::Index i = 0; i < layer.rows(); ++i) {
            layer.row(i) = squash_unit(layer.row(i), phi).transpose();
        }
    }
    return out;
}

ScaledUtility<FeatureUtility> scale_layerwise(const FeatureUtility& u, Squash phi) {
    ScaledUtility<FeatureUtility> out{u, Scaling::layerwise, phi, 0.0};
    for (auto& layer : out.values.layers) {
        layer = squash_unit(layer.transpose(), phi);
    }
    return out;
}

}  // namespace upgd
