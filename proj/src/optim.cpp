#include "upgd/optim.hpp"

#include "upgd/errors.hpp"

#include <boost/random/normal_distribution.hpp>

#include <cmath>
#include <limits>

namespace upgd {

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
constexpr std::uint64_t kUtilityStream = 0x7574696cULL;

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

bool is_feature_rule(Rule rule) {
    return rule == Rule::ups_feature || rule == Rule::upgd_feature || rule == Rule::upgd_feature_nonprotecting;
}

// dst = param - alpha * d, with d as in update_direction. Works on blocks of
// the [W | b] layout so nothing is stacked or copied.
template <class Dst, class P, class G, class N, class K>
void step_into(Dst&& dst, const P& param, Rule rule, double alpha, const G& grad, const N& noise, const K& gate) {
    switch (rule) {
        case Rule::sgd: dst = param - alpha * grad; return;
        case Rule::pgd:
        case Rule::anti_pgd: dst = param - alpha * (grad + noise); return;
        case Rule::ups_weight:
        case Rule::ups_feature: dst = param - alpha * noise.cwiseProduct(gate); return;
        case Rule::upgd_weight:
        case Rule::upgd_feature: dst = param - alpha * (grad + noise).cwiseProduct(gate); return;
        case Rule::upgd_weight_nonprotecting:
        case Rule::upgd_feature_nonprotecting: dst = param - alpha * (grad + noise.cwiseProduct(gate)); return;
    }
}

}  // namespace

std::string to_string(Rule rule) {
    switch (rule) {
        case Rule::sgd: return "sgd";
        case Rule::pgd: return "pgd";
        case Rule::anti_pgd: return "anti_pgd";
        case Rule::ups_weight: return "ups_weight";
        case Rule::ups_feature: return "ups_feature";
        case Rule::upgd_weight: return "upgd_weight";
        case Rule::upgd_feature: return "upgd_feature";
        case Rule::upgd_weight_nonprotecting: return "upgd_weight_nonprotecting";
        case Rule::upgd_feature_nonprotecting: return "upgd_feature_nonprotecting";
    }
    return "sgd";
}

Rule parse_rule(std::string_view name) {
    for (auto rule : {Rule::sgd, Rule::pgd, Rule::anti_pgd, Rule::ups_weight, Rule::ups_feature, Rule::upgd_weight,
                      Rule::upgd_feature, Rule::upgd_weight_nonprotecting, Rule::upgd_feature_nonprotecting}) {
        if (name == to_string(rule)) {
            return rule;
        }
    }
    throw InvalidArgument("unknown rule '" + std::string(name) + "'");
}

bool uses_weight_utility(Rule rule) {
    return rule == Rule::ups_weight || rule == Rule::upgd_weight || rule == Rule::upgd_weight_nonprotecting;
}

bool uses_feature_utility(Rule rule) { return is_feature_rule(rule); }

std::string to_string(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::none: return "none";
        case NoiseKind::normal: return "normal";
        case NoiseKind::anticorrelated: return "anticorrelated";
    }
    return "none";
}

NoiseKind parse_noise_kind(std::string_view name) {
    if (name == "none") return NoiseKind::none;
    if (name == "normal") return NoiseKind::normal;
    if (name == "anticorrelated" || name == "anti_correlated") return NoiseKind::anticorrelated;
    throw InvalidArgument("unknown noise kind '" + std::string(name) + "'");
}

NoiseState::NoiseState(NoiseKind kind, std::uint64_t seed) : kind_(kind), rng_(make_rng(seed, kNoiseStream)) {}

Matrix NoiseState::sample(std::size_t slot, Eigen::Index rows, Eigen::Index cols) {
    if (kind_ == NoiseKind::none) {
        return Matrix::Zero(rows, cols);
    }
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    Matrix draw(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            draw(i, j) = normal(rng_);
        }
    }
    return next(slot, draw);
}

Matrix NoiseState::next(std::size_t slot, const Matrix& draw) {
    if (kind_ == NoiseKind::none) {
        return Matrix::Zero(draw.rows(), draw.cols());
    }
    if (kind_ == NoiseKind::normal) {
        return draw;
    }
    if (previous_.size() <= slot) {
        previous_.resize(slot + 1);
    }
    auto& prev = previous_[slot];
    if (prev.rows() != draw.rows() || prev.cols() != draw.cols()) {
        prev = Matrix::Zero(draw.rows(), draw.cols());
    }
    Matrix xi = draw - prev;
    prev = draw;
    return xi;
}

void OptimizerConfig::validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
        throw ConfigError("step size must be positive and finite");
    }
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw ConfigError("beta must lie in [0, 1)");
    }
    if (uses_weight_utility(rule) && utility == UtilityKind::true_ablation) {
        throw ConfigError("the ablation utility is an oracle, not an optimizer input");
    }
    if (uses_feature_utility(rule) &&
        !(utility == UtilityKind::first_order || utility == UtilityKind::second_order ||
          utility == UtilityKind::random)) {
        throw ConfigError("feature rules support first_order, second_order or random utilities");
    }
}

Matrix update_direction(Rule rule, const Matrix& grad, const Matrix& noise, const Matrix& gate) {
    switch (rule) {
        case Rule::sgd: return grad;
        case Rule::pgd:
        case Rule::anti_pgd: return grad + noise;
        case Rule::ups_weight:
        case Rule::ups_feature: return noise.cwiseProduct(gate);
        case Rule::upgd_weight:
        case Rule::upgd_feature: return (grad + noise).cwiseProduct(gate);
        case Rule::upgd_weight_nonprotecting:
        case Rule::upgd_feature_nonprotecting: return grad + noise.cwiseProduct(gate);
    }
    return grad;
}

namespace {

OptimizerConfig validated(OptimizerConfig config) {
    config.validate();
    return config;
}

}  // namespace

OptimizerState::OptimizerState(OptimizerConfig config, std::uint64_t seed)
    : config_(validated(config)),
      noise_(config.noise, seed),
      utility_rng_(make_rng(seed, kUtilityStream)),
      weight_trace_(config.beta),
      feature_trace_(config.beta),
      running_eta_(-std::numeric_limits<double>::infinity()) {}

void apply_step(OptimizerState& state, Network& net, const BackwardTrace& bwd, double loss) {
    const auto& cfg = state.config_;
    const auto depth = net.depth();
    if (bwd.layers.size() != depth) {
        throw DimensionMismatch("backward trace does not belong to this network");
    }
    const Squash phi = cfg.squash();

    // Gates (1 - scaled utility) per layer in [W | b] layout; empty for ungated layers.
    std::vector<Matrix> gates(depth);
    if (cfg.pinned_utility && uses_utility(cfg.rule)) {
        const auto gated_layers = uses_weight_utility(cfg.rule) ? depth : depth - 1;
        for (std::size_t l = 0; l < gated_layers; ++l) {
            const auto& w = net.layers[l].weight;
            gates[l] = Matrix::Constant(w.rows(), w.cols() + 1, 1.0 - *cfg.pinned_utility);
        }
    } else if (uses_weight_utility(cfg.rule)) {
        WeightUtility instant;
        switch (cfg.utility) {
            case UtilityKind::second_order: instant = approx_weight_utility(bwd, net, Order::second); break;
            case UtilityKind::first_order: instant = approx_weight_utility(bwd, net, Order::first); break;
            case UtilityKind::weight_magnitude:
                instant = baseline_utility(Baseline::weight_magnitude, net, state.utility_rng_);
                break;
            case UtilityKind::random: instant = baseline_utility(Baseline::random, net, state.utility_rng_); break;
            case UtilityKind::true_ablation: throw ConfigError("ablation utility is not available to optimizers");
        }
        state.weight_trace_.update(instant);
        auto corrected = state.weight_trace_.corrected();
        ScaledUtility<WeightUtility> scaled;
        if (cfg.scaling == Scaling::global) {
            if (cfg.running_max_eta) {
                state.running_eta_ = std::max(state.running_eta_, max_entry(corrected));
                scaled = scale_global(corrected, phi, state.running_eta_);
            } else {
                scaled = scale_global(corrected, phi);
            }
        } else {
            scaled = scale_layerwise(corrected, phi);
        }
        for (std::size_t l = 0; l < depth; ++l) {
            gates[l] = (1.0 - scaled.values.layers[l].array()).matrix();
        }
        state.raw_weight_ = std::move(corrected);
        state.scaled_weight_ = std::move(scaled);
    } else if (uses_feature_utility(cfg.rule)) {
        FeatureUtility instant;
        switch (cfg.utility) {
            case UtilityKind::second_order: instant = approx_feature_utility(bwd, Order::second); break;
            case UtilityKind::first_order: instant = approx_feature_utility(bwd, Order::first); break;
            case UtilityKind::random: instant = random_feature_utility(net, state.utility_rng_); break;
            default: throw ConfigError("unsupported feature utility");
        }
        state.feature_trace_.update(instant);
        auto corrected = state.feature_trace_.corrected();
        ScaledUtility<FeatureUtility> scaled;
        if (cfg.scaling == Scaling::global) {
            if (cfg.running_max_eta) {
                state.running_eta_ = std::max(state.running_eta_, max_entry(corrected));
                scaled = scale_global(corrected, phi, state.running_eta_);
            } else {
                scaled = scale_global(corrected, phi);
            }
        } else {
            scaled = scale_layerwise(corrected, phi);
        }
        // Feature j of hidden layer l gates row j of W_l and b_l.
        for (std::size_t l = 0; l + 1 < depth; ++l) {
            const auto cols = net.layers[l].weight.cols() + 1;
            const Vector keep = (1.0 - scaled.values.layers[l].array()).matrix();
            gates[l] = keep.replicate(1, cols);
        }
        state.raw_feature_ = std::move(corrected);
        state.scaled_feature_ = std::move(scaled);
    }

    const bool decay = cfg.noise_decay && uses_utility(cfg.rule);
    const double noise_scale = decay ? std::tanh(loss) : 1.0;

    auto& new_weights = state.scratch_weight_;
    auto& new_biases = state.scratch_bias_;
    new_weights.resize(depth);
    new_biases.resize(depth);
    const double alpha = cfg.step_size;
    for (std::size_t l = 0; l < depth; ++l) {
        const auto& layer = net.layers[l];
        const auto& d = bwd.layers[l];
        const auto in = layer.weight.cols();
        const bool output_sgd = is_feature_rule(cfg.rule) && l + 1 == depth;
        if (cfg.rule == Rule::sgd || output_sgd) {
            new_weights[l].noalias() = layer.weight - alpha * d.weight_grad;
            new_biases[l].noalias() = layer.bias - alpha * d.bias_grad;
        } else {
            Matrix noise = state.noise_.sample(l, layer.weight.rows(), in + 1);
            if (noise_scale != 1.0) {
                noise *= noise_scale;
            }
            if (gates[l].size() == 0) {
                gates[l] = Matrix::Ones(layer.weight.rows(), in + 1);
            }
            const Matrix& gate = gates[l];
            new_weights[l].resize(layer.weight.rows(), in);
            new_biases[l].resize(layer.bias.size());
            step_into(new_weights[l], layer.weight, cfg.rule, alpha, d.weight_grad, noise.leftCols(in),
                      gate.leftCols(in));
            step_into(new_biases[l], layer.bias, cfg.rule, alpha, d.bias_grad, noise.col(in), gate.col(in));
        }
        if (!new_weights[l].allFinite() || !new_biases[l].allFinite()) {
            throw Diverged("non-finite parameter after step " + std::to_string(state.steps_ + 1) + " in layer " +
                           std::to_string(l));
        }
    }
    for (std::size_t l = 0; l < depth; ++l) {
        // Swap keeps the old buffers around for the next step.
        net.layers[l].weight.swap(new_weights[l]);
        net.layers[l].bias.swap(new_biases[l]);
    }
    ++state.steps_;
}

}  // namespace upgd
