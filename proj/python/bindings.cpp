#include "upgd/errors.hpp"
#include "upgd/harness.hpp"
#include "upgd/metrics.hpp"
#include "upgd/nn.hpp"
#include "upgd/tasks.hpp"
#include "upgd/utility.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace upgd;

namespace {

py::dict cell_dict(const CellSummary& c) {
    py::dict d;
    d["label"] = c.label;
    d["rule"] = to_string(c.rule);
    d["step_size"] = c.step_size;
    d["n_seeds"] = c.n_seeds;
    d["n_diverged"] = c.n_diverged;
    d["mean_score"] = c.mean_score;
    d["mean_first5_loss"] = c.mean_first5_loss;
    d["mean_last5_loss"] = c.mean_last5_loss;
    d["mean_first5_accuracy"] = c.mean_first5_accuracy;
    d["mean_last5_accuracy"] = c.mean_last5_accuracy;
    d["best"] = c.best;
    return d;
}

py::dict sweep_dict(const SweepSummary& s) {
    py::list cells;
    for (const auto& c : s.cells) {
        cells.append(cell_dict(c));
    }
    py::dict d;
    d["cells"] = cells;
    d["labels"] = s.labels;
    d["partial"] = s.partial();
    return d;
}

ConfigOverrides make_overrides(std::optional<std::string> preset, std::optional<std::size_t> seeds,
                               std::optional<std::int64_t> steps, std::optional<std::string> out,
                               std::optional<std::size_t> workers) {
    ConfigOverrides o;
    o.preset = std::move(preset);
    o.seeds = seeds;
    o.steps = steps;
    if (out) {
        o.out_dir = *out;
    }
    o.workers = workers;
    return o;
}

}  // namespace

PYBIND11_MODULE(_upgd, m) {
    m.doc() = "Utility-based perturbed gradient descent core";

    auto base = py::register_exception<Error>(m, "UpgdError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<Diverged>(m, "Diverged", base.ptr());
    py::register_exception<ConstantInput>(m, "ConstantInput", base.ptr());
    py::register_exception<NearZeroDenominator>(m, "NearZeroDenominator", base.ptr());
    py::register_exception<DatasetNotLoaded>(m, "DatasetNotLoaded", base.ptr());

    py::class_<Network>(m, "Network")
        .def_property_readonly("depth", &Network::depth)
        .def_property_readonly("parameter_count", &Network::parameter_count)
        .def_property_readonly("loss", [](const Network& n) { return to_string(n.loss); })
        .def_property_readonly("weights",
                               [](const Network& n) {
                                   std::vector<Matrix> out;
                                   for (const auto& l : n.layers) out.push_back(l.weight);
                                   return out;
                               })
        .def_property_readonly("biases", [](const Network& n) {
            std::vector<Vector> out;
            for (const auto& l : n.layers) out.push_back(l.bias);
            return out;
        });

    m.def(
        "build_network",
        [](const std::vector<std::size_t>& sizes, const std::string& activation, const std::string& loss,
           std::uint64_t seed) { return build_network(sizes, Activation::parse(activation), parse_loss(loss), seed); },
        py::arg("sizes"), py::arg("activation") = "tanh", py::arg("loss") = "mse", py::arg("seed") = 0);

    m.def(
        "loss",
        [](const Network& net, const Matrix& x, const Matrix& y) { return evaluate_loss(net, x, y); },
        py::arg("net"), py::arg("inputs"), py::arg("targets"));

    m.def(
        "weight_utility",
        [](const Network& net, const Matrix& x, const Matrix& y, const std::string& kind) {
            const auto k = parse_utility_kind(kind);
            WeightUtility u;
            if (k == UtilityKind::true_ablation) {
                u = true_weight_utility(net, x, y);
            } else if (k == UtilityKind::second_order || k == UtilityKind::first_order) {
                const auto fwd = forward(net, x, y);
                const auto bwd = backward(net, fwd, y);
                u = approx_weight_utility(bwd, net, k == UtilityKind::second_order ? Order::second : Order::first);
            } else {
                throw InvalidArgument("weight_utility supports true_ablation, second_order and first_order");
            }
            return u.layers;
        },
        py::arg("net"), py::arg("inputs"), py::arg("targets"), py::arg("kind") = "second_order",
        "Per-layer [out x (in+1)] utilities; the last column belongs to the bias.");

    m.def(
        "feature_utility",
        [](const Network& net, const Matrix& x, const Matrix& y, const std::string& kind) {
            const auto k = parse_utility_kind(kind);
            if (k == UtilityKind::true_ablation) {
                return true_feature_utility(net, x, y).layers;
            }
            if (k != UtilityKind::second_order && k != UtilityKind::first_order) {
                throw InvalidArgument("feature_utility supports true_ablation, second_order and first_order");
            }
            const auto fwd = forward(net, x, y);
            const auto bwd = backward(net, fwd, y);
            return approx_feature_utility(bwd, k == UtilityKind::second_order ? Order::second : Order::first).layers;
        },
        py::arg("net"), py::arg("inputs"), py::arg("targets"), py::arg("kind") = "second_order");

    m.def(
        "scale_global",
        [](const std::vector<Matrix>& layers, const std::string& phi) {
            WeightUtility u;
            u.layers = layers;
            const auto s = scale_global(u, parse_squash(phi));
            return py::make_tuple(s.values.layers, s.eta);
        },
        py::arg("utilities"), py::arg("phi") = "sigmoid");

    m.def(
        "spearman",
        [](const std::vector<double>& u, const std::vector<double>& v) { return spearman(u, v).rho; },
        py::arg("u"), py::arg("v"));
    m.def("average_ranks", [](const std::vector<double>& v) { return average_ranks(v); }, py::arg("values"));

    m.def("preset_names", &preset_names);
    m.def(
        "preset_config", [](const std::string& name) { return config_to_json(preset_config(name)); }, py::arg("name"),
        "JSON text of a named preset.");

    m.def(
        "run",
        [](const std::string& config_path, std::optional<std::string> preset, std::optional<std::size_t> seeds,
           std::optional<std::int64_t> steps, std::optional<std::string> out, std::optional<std::size_t> workers) {
            const auto cfg = load_config(config_path, make_overrides(preset, seeds, steps, out, workers));
            SweepSummary s;
            {
                py::gil_scoped_release release;
                cfg.validate();
                s = run_experiment(cfg);
            }
            return sweep_dict(s);
        },
        py::arg("config_path"), py::kw_only(), py::arg("preset") = py::none(), py::arg("seeds") = py::none(),
        py::arg("steps") = py::none(), py::arg("out") = py::none(), py::arg("workers") = py::none());

    m.def(
        "probe",
        [](const std::string& config_path, std::optional<std::string> out) {
            const auto cfg = load_config(config_path, make_overrides(std::nullopt, std::nullopt, std::nullopt, out,
                                                                     std::nullopt));
            ProbeSummary s;
            {
                py::gil_scoped_release release;
                s = run_quality_probe(cfg);
            }
            py::dict d;
            for (std::size_t c = 0; c < s.columns.size(); ++c) {
                d[py::str(s.columns[c])] = s.mean[c];
            }
            return d;
        },
        py::arg("config_path"), py::kw_only(), py::arg("out") = py::none());

    m.def(
        "summarize", [](const std::string& dir) { return sweep_dict(summarize_directory(dir)); }, py::arg("dir"));

    py::class_<TaskStream>(m, "TaskStream")
        .def(py::init([](const std::string& kind, std::uint64_t seed, std::size_t batch_size) {
                 const auto cfg = resolve_config("{\"stream\": {\"kind\": \"" + kind + "\"}}");
                 if (needs_mnist(cfg.stream)) {
                     return TaskStream(cfg.stream, seed, batch_size, load_config_mnist(cfg));
                 }
                 return TaskStream(cfg.stream, seed, batch_size);
             }),
             py::arg("kind"), py::arg("seed") = 0, py::arg("batch_size") = 32)
        .def_property_readonly("input_size", &TaskStream::input_size)
        .def_property_readonly("output_size", &TaskStream::output_size)
        .def("next_batch", [](TaskStream& s) {
            auto b = s.next_batch();
            return py::make_tuple(b.inputs, b.targets, b.labels);
        });
}
