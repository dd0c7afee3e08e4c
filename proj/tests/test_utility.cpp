#include "properties.hpp"
#include "support.hpp"

#include "upgd/errors.hpp"
#include "upgd/utility.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace upgd;
using namespace upgd::testing;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

WeightUtility weight_utility(std::initializer_list<Matrix> layers) {
    WeightUtility u;
    u.layers.assign(layers.begin(), layers.end());
    return u;
}

FeatureUtility feature_utility(std::initializer_list<Vector> layers) {
    FeatureUtility u;
    u.layers.assign(layers.begin(), layers.end());
    return u;
}

Vector vec(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    std::copy(xs.begin(), xs.end(), v.data());
    return v;
}

std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
}

std::vector<double> flat(const WeightUtility& u) {
    std::vector<double> out;
    for (const auto& m : u.layers) {
        out.insert(out.end(), m.data(), m.data() + m.size());
    }
    return out;
}

}  // namespace

TEST_SUITE("utility") {

TEST_CASE("true weight utility on a scalar net") {
    const auto net = chain({2.0}, Activation::identity());
    const auto u = true_weight_utility(net, scalar(3.0), scalar(0.0));
    CHECK(u.weights(0)(0, 0) == -36.0);
    CHECK(u.bias(0)(0) == 0.0);
}

TEST_CASE("removing a useful weight gives positive utility") {
    const auto net = chain({2.0}, Activation::identity());
    const auto u = true_weight_utility(net, scalar(3.0), scalar(6.0));
    CHECK(u.weights(0)(0, 0) == 36.0);
}

TEST_CASE("true feature utility") {
    const auto net = chain({2.0, 3.0}, Activation::identity());
    CHECK(true_feature_utility(net, scalar(1.0), scalar(0.0)).layers[0](0) == -36.0);

    std::mt19937_64 rng(4);
    auto wide = random_network(rng, {3, 4, 2}, Activation::relu(), Loss::mse, false);
    wide.layers[0].weight.row(2).setZero();  // feature 2 is dead on every input
    const Matrix x = uniform_matrix(rng, 5, 3);
    const Matrix y = uniform_matrix(rng, 5, 2);
    const auto u = true_feature_utility(wide, x, y);
    CHECK(u.layers[0](2) == 0.0);
    const auto bwd = backward(wide, forward(wide, x, y), y);
    CHECK(approx_feature_utility(bwd, Order::first).layers[0](2) == 0.0);
    CHECK(approx_feature_utility(bwd, Order::second).layers[0](2) == 0.0);
}

TEST_CASE("zero parameters have zero utility") {
    std::mt19937_64 rng(8);
    auto net = random_network(rng, {3, 4, 2}, Activation::tanh(), Loss::mse);
    net.layers[0].weight(1, 2) = 0.0;
    net.layers[1].bias(0) = 0.0;
    const Matrix x = uniform_matrix(rng, 4, 3);
    const Matrix y = uniform_matrix(rng, 4, 2);
    const auto u = true_weight_utility(net, x, y);
    CHECK(u.weights(0)(1, 2) == 0.0);
    CHECK(u.bias(1)(0) == 0.0);

    for (auto& layer : net.layers) {
        layer.weight.setZero();
        layer.bias.setZero();
    }
    const auto bwd = backward(net, forward(net, x, y), y);
    for (auto order : {Order::first, Order::second}) {
        for (const auto& m : approx_weight_utility(bwd, net, order).layers) {
            CHECK(m.isZero(0.0));
        }
    }
}

TEST_CASE("approximate weight utility on a scalar net") {
    const auto net = chain({2.0}, Activation::identity());
    const auto bwd = backward(net, forward(net, scalar(3.0), scalar(0.0)), scalar(0.0));
    CHECK(approx_weight_utility(bwd, net, Order::second).weights(0)(0, 0) == -36.0);
    CHECK(approx_weight_utility(bwd, net, Order::first).weights(0)(0, 0) == -72.0);
}

TEST_CASE("approximate feature utility on a two-layer chain") {
    const auto net = chain({2.0, 3.0}, Activation::identity());
    const auto bwd = backward(net, forward(net, scalar(1.0), scalar(0.0)), scalar(0.0));
    CHECK(approx_feature_utility(bwd, Order::second).layers[0](0) == -36.0);
    CHECK(approx_feature_utility(bwd, Order::first).layers[0](0) == -72.0);
}

TEST_CASE("second order without curvature is rejected") {
    const auto net = chain({2.0, 3.0}, Activation::identity());
    const auto fwd = forward(net, scalar(1.0), scalar(0.0));
    const auto bwd = backward(net, fwd, scalar(0.0), false);
    CHECK_THROWS_AS((void)approx_weight_utility(bwd, net, Order::second), InvalidArgument);
    CHECK_THROWS_AS((void)approx_feature_utility(bwd, Order::second), InvalidArgument);
    CHECK_THROWS_AS((void)propagate_utility(net, fwd, bwd), InvalidArgument);
    CHECK(approx_weight_utility(bwd, net, Order::first).weights(0)(0, 0) == -72.0);
}

TEST_CASE("first order equals second order with zero curvature") {
    std::mt19937_64 rng(12);
    const auto net = random_network(rng, {3, 5, 2}, Activation::tanh(), Loss::mse);
    const Matrix x = uniform_matrix(rng, 4, 3);
    const Matrix y = uniform_matrix(rng, 4, 2);
    auto bwd = backward(net, forward(net, x, y), y);
    const auto first = approx_weight_utility(bwd, net, Order::first);
    for (auto& d : bwd.layers) {
        d.weight_curv.setZero();
        d.bias_curv.setZero();
    }
    for (auto& s : bwd.mask_curv) {
        s.setZero();
    }
    const auto second = approx_weight_utility(bwd, net, Order::second);
    for (std::size_t l = 0; l < first.layers.size(); ++l) {
        CHECK(first.layers[l] == second.layers[l]);
    }
    CHECK(approx_feature_utility(bwd, Order::first).layers[0] == approx_feature_utility(bwd, Order::second).layers[0]);
}

TEST_CASE("baselines") {
    auto net = chain({-3.0}, Activation::identity());
    std::mt19937_64 rng(1);
    CHECK(baseline_utility(Baseline::weight_magnitude, net, rng).weights(0)(0, 0) == 3.0);

    std::mt19937_64 a(5);
    std::mt19937_64 b(5);
    const auto wide = build_network(std::vector<std::size_t>{3, 4, 2}, Activation::tanh(), Loss::mse, 0);
    const auto ua = baseline_utility(Baseline::random, wide, a);
    const auto ub = baseline_utility(Baseline::random, wide, b);
    CHECK(ua.layers[0] == ub.layers[0]);
    CHECK(ua.layers[1] == ub.layers[1]);
    CHECK(baseline_utility(Baseline::random, wide, a).layers[0] != ua.layers[0]);
    CHECK(random_feature_utility(wide, a).layers[0].size() == 4);
}

TEST_CASE("second order matches ablation on a single linear layer") {
    const auto r = quadratic_property(101, 100);
    CHECK(r.second.worst <= 1e-10);
    CHECK(r.library_oracle_gap <= 16.0);
    CHECK(r.first_min_gap > 1e-6);
}

TEST_CASE("feature utility is the sum over outgoing weights") {
    CHECK(outgoing_sum_property(102, 100).worst <= 1e-10);
}

TEST_CASE("incoming and outgoing utility agree on scalar chains") {
    CHECK(conservation_property(103, 100).worst <= 1e-10);
}

TEST_CASE("utility propagation") {
    SUBCASE("scalar chain example") {
        const auto net = chain({1.0, 1.0}, Activation::identity());
        const auto fwd = forward(net, scalar(1.0), scalar(0.0));
        const auto bwd = backward(net, fwd, scalar(0.0));
        const auto u = propagate_utility(net, fwd, bwd);
        CHECK(u[0](0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
        CHECK(u[0](0, 0) == doctest::Approx(approx_weight_utility(bwd, net, Order::second).weights(0)(0, 0)));
    }
    SUBCASE("zero residual leaves only the curvature part") {
        std::mt19937_64 rng(17);
        const auto net = random_network(rng, {3, 4, 2}, Activation::tanh(), Loss::mse);
        const Matrix x = uniform_matrix(rng, 2, 3);
        const Matrix y = forward(net, x, Matrix::Zero(2, 2)).prediction;
        const auto fwd = forward(net, x, y);
        const auto bwd = backward(net, fwd, y);
        const auto u = propagate_utility(net, fwd, bwd);
        for (std::size_t l = 0; l < 2; ++l) {
            CHECK((u[l].array() >= 0.0).all());
        }
    }
    SUBCASE("random nets") {
        const auto r = propagation_property(104, 100);
        CHECK(r.worst <= 1e-8);
    }
    SUBCASE("near-zero hidden activation") {
        auto net = chain({1.0, 1.0}, Activation::identity());
        const auto fwd = forward(net, scalar(0.0), scalar(1.0));
        const auto bwd = backward(net, fwd, scalar(1.0));
        CHECK_THROWS_AS((void)propagate_utility(net, fwd, bwd), NearZeroDenominator);
    }
}

TEST_CASE("utility trace") {
    SUBCASE("bias correction at the first step") {
        UtilityTrace<FeatureUtility> trace(0.9);
        trace.update(feature_utility({vec({5.0})}));
        CHECK(trace.corrected().layers[0](0) == doctest::Approx(5.0).epsilon(1e-15));
        CHECK(trace.step() == 1);
    }
    SUBCASE("beta zero returns the latest value exactly") {
        UtilityTrace<WeightUtility> trace(0.0);
        for (double m : {1.0, -2.5, 7.25}) {
            trace.update(weight_utility({scalar(m)}));
            CHECK(trace.corrected().layers[0](0, 0) == m);
        }
    }
    SUBCASE("constant input is a fixed point") {
        UtilityTrace<FeatureUtility> trace(0.99);
        for (int t = 0; t < 50; ++t) {
            trace.update(feature_utility({vec({0.3, -1.7})}));
            CHECK(trace.corrected().layers[0](0) == doctest::Approx(0.3).epsilon(1e-12));
            CHECK(trace.corrected().layers[0](1) == doctest::Approx(-1.7).epsilon(1e-12));
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(UtilityTrace<FeatureUtility>(1.0), InvalidArgument);
        CHECK_THROWS_AS(UtilityTrace<FeatureUtility>(-0.1), InvalidArgument);
        UtilityTrace<FeatureUtility> trace(0.5);
        trace.update(feature_utility({vec({1.0})}));
        CHECK_THROWS_AS(trace.update(feature_utility({vec({1.0, 2.0})})), DimensionMismatch);
    }
}

TEST_CASE("global scaling") {
    const auto u = weight_utility({(Matrix(1, 3) << 2.0, 0.0, -1e300).finished()});
    const auto s = scale_global(u, Squash::sigmoid);
    CHECK(s.eta == 2.0);
    CHECK(s.values.layers[0](0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.values.layers[0](0, 1) == doctest::Approx(0.5 * (1.0 + std::exp(-1.0))).epsilon(1e-15));
    CHECK(s.values.layers[0](0, 1) == doctest::Approx(0.6840).epsilon(1e-4));
    CHECK(s.values.layers[0](0, 2) == 0.0);

    SUBCASE("negative eta is clamped into the unit interval") {
        const auto neg = scale_global(weight_utility({(Matrix(1, 2) << -1.0, -4.0).finished()}), Squash::sigmoid);
        CHECK(neg.eta == -1.0);
        CHECK((neg.values.layers[0].array() >= 0.0).all());
        CHECK((neg.values.layers[0].array() <= 1.0).all());
    }
    SUBCASE("degenerate eta") {
        const auto zero = scale_global(weight_utility({Matrix::Zero(2, 2)}), Squash::sigmoid);
        CHECK(zero.values.layers[0].isConstant(0.5 * (1.0 + std::exp(-1.0))));
    }
    SUBCASE("tanh maps negative ratios to zero") {
        const auto t = scale_global(feature_utility({vec({1.0, -1.0})}), Squash::tanh);
        CHECK(t.values.layers[0](0) == doctest::Approx(1.0));
        CHECK(t.values.layers[0](1) == 0.0);
    }
    SUBCASE("explicit eta") {
        const auto e = scale_global(feature_utility({vec({1.0})}), Squash::sigmoid, 4.0);
        CHECK(e.eta == 4.0);
        CHECK(e.values.layers[0](0) == doctest::Approx(squash(Squash::sigmoid, 0.25) / squash(Squash::sigmoid, 1.0)));
    }
}

TEST_CASE("global scaling preserves the utility ranking") {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        WeightUtility u;
        for (int l = 0; l < 3; ++l) {
            Matrix m(4, 6);
            for (Eigen::Index k = 0; k < m.size(); ++k) {
                m.data()[k] = normal(rng);
            }
            u.layers.push_back(m);
        }
        const auto raw = flat(u);
        const auto scaled = flat(scale_global(u, Squash::sigmoid).values);
        CHECK(argsort(raw) == argsort(scaled));
        CHECK(*std::max_element(scaled.begin(), scaled.end()) == doctest::Approx(1.0));
        for (double v : scaled) {
            CHECK((v >= 0.0 && v <= 1.0));
        }
    }
}

TEST_CASE("layer-wise scaling") {
    const auto row = scale_layerwise(feature_utility({vec({3.0, 4.0})}), Squash::tanh);
    CHECK(row.values.layers[0](0) == doctest::Approx(std::tanh(0.6)).epsilon(1e-15));
    CHECK(row.values.layers[0](1) == doctest::Approx(std::tanh(0.8)).epsilon(1e-15));
    CHECK(scale_layerwise(feature_utility({vec({-7.0})}), Squash::tanh).values.layers[0](0) ==
          doctest::Approx(std::tanh(-1.0)));
    CHECK(scale_layerwise(feature_utility({vec({0.0, 0.0})}), Squash::tanh).values.layers[0].isZero(0.0));

    const auto w = scale_layerwise(weight_utility({(Matrix(2, 2) << 3.0, 4.0, 0.0, 0.0).finished()}), Squash::tanh);
    CHECK(w.values.layers[0](0, 1) == doctest::Approx(std::tanh(0.8)));
    CHECK(w.values.layers[0].row(1).isZero(0.0));
    CHECK((w.values.layers[0].array().abs() < 1.0).all());
}

TEST_CASE("names round-trip") {
    for (auto k : {UtilityKind::true_ablation, UtilityKind::second_order, UtilityKind::first_order,
                   UtilityKind::weight_magnitude, UtilityKind::random}) {
        CHECK(parse_utility_kind(to_string(k)) == k);
    }
    CHECK(parse_squash("tanh") == Squash::tanh);
    CHECK(parse_scaling("layerwise") == Scaling::layerwise);
    CHECK_THROWS_AS((void)parse_squash("relu"), InvalidArgument);
}

}
