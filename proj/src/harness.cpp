#include "upgd/harness.hpp"

#include "upgd/csv.hpp"
#include "upgd/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace upgd {

using json = nlohmann::ordered_json;

namespace {

Method make_method(Rule rule, UtilityKind utility = UtilityKind::second_order, Scaling scaling = Scaling::global) {
    Method m;
    m.optimizer.rule = rule;
    m.optimizer.utility = utility;
    m.optimizer.scaling = scaling;
    return m;
}

std::string default_label(const OptimizerConfig& opt) {
    std::string label = to_string(opt.rule);
    if (uses_utility(opt.rule)) {
        if (opt.utility != UtilityKind::second_order) {
            label += "_" + to_string(opt.utility);
        }
        if (opt.scaling == Scaling::layerwise) {
            label += "_layerwise";
        }
    }
    return label;
}

std::string format_step(double step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", step);
    return buf;
}

// Training allocates multi-megabyte temporaries every step. Keeping freed
// memory in the heap avoids a page-fault storm when glibc would otherwise
// return it to the kernel.
void tune_allocator() {
#if defined(__GLIBC__)
    static std::once_flag once;
    std::call_once(once, [] {
        mallopt(M_MMAP_THRESHOLD, 32 << 20);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
    });
#endif
}

std::string sanitize(std::string text) {
    std::replace(text.begin(), text.end(), ',', ';');
    std::replace(text.begin(), text.end(), '\n', ' ');
    return text;
}

// ---- JSON <-> config -------------------------------------------------------

json stream_to_json(const StreamKind& kind) {
    json j;
    j["kind"] = stream_name(kind);
    if (const auto* k = std::get_if<LabelPermutedMnist>(&kind)) {
        j["period"] = k->period;
        j["identity_first"] = k->identity_first;
    } else if (const auto* k = std::get_if<ChangingAdder>(&kind)) {
        j["n_inputs"] = k->n_inputs;
        j["period"] = k->period;
    } else if (const auto* k = std::get_if<PermutedAdder>(&kind)) {
        j["n_inputs"] = k->n_inputs;
        j["period"] = k->period;
    } else if (const auto* k = std::get_if<UtilityProbeAdder>(&kind)) {
        j["n_inputs"] = k->n_inputs;
    }
    return j;
}

StreamKind stream_from_json(const json& j, const StreamKind& base) {
    const std::string kind = j.value("kind", stream_name(base));
    const bool same = kind == stream_name(base);
    if (kind == "stationary_mnist") {
        return StationaryMnist{};
    }
    if (kind == "label_permuted_mnist") {
        LabelPermutedMnist s = same ? std::get<LabelPermutedMnist>(base) : LabelPermutedMnist{};
        s.period = j.value("period", s.period);
        s.identity_first = j.value("identity_first", s.identity_first);
        return s;
    }
    if (kind == "changing_adder") {
        ChangingAdder s = same ? std::get<ChangingAdder>(base) : ChangingAdder{};
        s.n_inputs = j.value("n_inputs", s.n_inputs);
        s.period = j.value("period", s.period);
        return s;
    }
    if (kind == "permuted_adder") {
        PermutedAdder s = same ? std::get<PermutedAdder>(base) : PermutedAdder{};
        s.n_inputs = j.value("n_inputs", s.n_inputs);
        s.period = j.value("period", s.period);
        return s;
    }
    if (kind == "utility_probe_adder") {
        UtilityProbeAdder s = same ? std::get<UtilityProbeAdder>(base) : UtilityProbeAdder{};
        s.n_inputs = j.value("n_inputs", s.n_inputs);
        return s;
    }
    throw ConfigError("unknown stream kind '" + kind + "'");
}

json method_to_json(const Method& m) {
    const auto& o = m.optimizer;
    json j;
    j["label"] = m.label;
    j["rule"] = to_string(o.rule);
    j["utility"] = to_string(o.utility);
    j["scaling"] = to_string(o.scaling);
    j["phi"] = to_string(o.squash());
    j["beta"] = o.beta;
    j["noise"] = to_string(o.noise);
    j["noise_decay"] = o.noise_decay;
    j["running_max_eta"] = o.running_max_eta;
    return j;
}

Method method_from_json(const json& j) {
    Method m;
    if (j.is_string()) {
        m.optimizer.rule = parse_rule(j.get<std::string>());
        m.label = default_label(m.optimizer);
        return m;
    }
    if (!j.is_object() || !j.contains("rule")) {
        throw ConfigError("each method needs a 'rule'");
    }
    auto& o = m.optimizer;
    o.rule = parse_rule(j.at("rule").get<std::string>());
    if (j.contains("utility")) o.utility = parse_utility_kind(j.at("utility").get<std::string>());
    if (j.contains("scaling")) o.scaling = parse_scaling(j.at("scaling").get<std::string>());
    if (j.contains("phi")) o.phi = parse_squash(j.at("phi").get<std::string>());
    o.beta = j.value("beta", o.beta);
    if (j.contains("noise")) o.noise = parse_noise_kind(j.at("noise").get<std::string>());
    o.noise_decay = j.value("noise_decay", o.noise_decay);
    o.running_max_eta = j.value("running_max_eta", o.running_max_eta);
    m.label = j.value("label", default_label(o));
    return m;
}

void apply_json(ExperimentConfig& cfg, const json& j) {
    static const std::vector<std::string> known{"version", "preset", "stream",      "network",    "methods",
                                                "step_sizes", "seeds", "steps",     "batch_size", "out_dir",
                                                "workers",  "mnist_dir", "scaling_check_interval", "probe"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    if (j.contains("version") && j.at("version").get<int>() != kConfigVersion) {
        throw ConfigError("unsupported config version " + j.at("version").dump());
    }
    if (j.contains("stream")) cfg.stream = stream_from_json(j.at("stream"), cfg.stream);
    if (j.contains("network")) {
        const auto& n = j.at("network");
        if (n.contains("hidden")) cfg.hidden = n.at("hidden").get<std::vector<std::size_t>>();
        if (n.contains("activation")) cfg.activation = Activation::parse(n.at("activation").get<std::string>());
    }
    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& m : j.at("methods")) {
            cfg.methods.push_back(method_from_json(m));
        }
    }
    if (j.contains("step_sizes")) cfg.step_sizes = j.at("step_sizes").get<std::vector<double>>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    cfg.workers = j.value("workers", cfg.workers);
    cfg.mnist_dir = j.value("mnist_dir", cfg.mnist_dir);
    cfg.scaling_check_interval = j.value("scaling_check_interval", cfg.scaling_check_interval);
    if (j.contains("probe")) {
        const auto& p = j.at("probe");
        if (p.contains("target")) {
            const auto t = p.at("target").get<std::string>();
            if (t == "weight") cfg.probe_target = ProbeTarget::weight;
            else if (t == "feature") cfg.probe_target = ProbeTarget::feature;
            else throw ConfigError("probe target must be 'weight' or 'feature'");
        }
        cfg.probe_step_size = p.value("step_size", cfg.probe_step_size);
        cfg.probe_burn_in = p.value("burn_in", cfg.probe_burn_in);
    }
}

// ---- training --------------------------------------------------------------

double batch_accuracy(const Matrix& prediction, const std::vector<int>& labels) {
    std::size_t correct = 0;
    for (Eigen::Index n = 0; n < prediction.rows(); ++n) {
        Eigen::Index arg = 0;
        prediction.row(n).maxCoeff(&arg);
        if (arg == labels[static_cast<std::size_t>(n)]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(prediction.rows());
}

template <class U>
bool check_scaled(const U& raw, const ScaledUtility<U>& scaled) {
    return check_scaling_contract(flatten_utilities(raw, Scope::global), flatten_utilities(scaled.values, Scope::global),
                                  scaled.eta);
}

struct CellJob {
    std::size_t method;
    std::size_t step_index;
    std::size_t seed_index;
};

RunOutcome run_cell(const ExperimentConfig& cfg, const CellJob& job, const std::shared_ptr<const MnistDataset>& mnist) {
    const auto& method = cfg.methods[job.method];
    const double step_size = cfg.step_sizes[job.step_index];
    const auto seed = cfg.seeds[job.seed_index];

    RunOutcome out;
    out.method = job.method;
    out.step_index = job.step_index;
    out.seed = seed;
    out.file = "runs/" + method.label + "_a" + format_step(step_size) + "_s" + std::to_string(seed) + ".csv";

    TaskStream stream(cfg.stream, seed, cfg.batch_size, mnist);
    const auto sizes = cfg.layer_sizes(stream.input_size(), stream.output_size());
    Network net = build_network(sizes, cfg.activation, cfg.loss(), seed);
    OptimizerConfig opt_cfg = method.optimizer;
    opt_cfg.step_size = step_size;
    OptimizerState opt(opt_cfg, seed);

    const bool classification = is_classification(cfg.stream);
    const auto period = task_period(cfg.stream);
    const bool check_global = opt_cfg.scaling == Scaling::global && uses_utility(opt_cfg.rule);

    csv::Writer writer(cfg.out_dir / out.file, {"step", "task_index", "loss", "accuracy"});
    std::vector<StepRecord> records;
    records.reserve(static_cast<std::size_t>(cfg.steps));

    for (std::int64_t t = 0; t < cfg.steps; ++t) {
        const Batch batch = stream.next_batch();
        const ForwardTrace fwd = forward(net, batch.inputs, batch.targets);
        StepRecord rec{t, fwd.loss, std::nullopt};
        if (classification) {
            rec.accuracy = batch_accuracy(fwd.prediction, batch.labels);
        }
        writer.row({std::to_string(t), std::to_string(period > 0 ? t / period : 0), csv::format(rec.loss),
                    csv::format(rec.accuracy)});
        records.push_back(rec);
        if (!std::isfinite(fwd.loss)) {
            out.diverged = true;
            out.diagnostic = "non-finite loss at step " + std::to_string(t);
            break;
        }
        const BackwardTrace bwd = backward(net, fwd, batch.targets, opt_cfg.needs_curvature());
        try {
            apply_step(opt, net, bwd, fwd.loss);
        } catch (const Diverged& e) {
            out.diverged = true;
            out.diagnostic = e.what();
            break;
        } catch (const NonFinite& e) {
            out.diverged = true;
            out.diagnostic = e.what();
            break;
        }
        if (check_global && cfg.scaling_check_interval > 0 && t % cfg.scaling_check_interval == 0) {
            bool ok = true;
            if (opt.last_scaled_weight()) {
                ok = check_scaled(*opt.last_weight_utility(), *opt.last_scaled_weight());
            } else if (opt.last_scaled_feature()) {
                ok = check_scaled(*opt.last_feature_utility(), *opt.last_scaled_feature());
            }
            ++out.scaling_checks;
            if (!ok) {
                ++out.scaling_violations;
            }
        }
    }
    out.record = summarize_run(records, period);
    out.record.steps.clear();
    return out;
}

template <class Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    double sum = 0.0;
    for (double x : v) {
        sum += x;
    }
    return sum / static_cast<double>(v.size());
}

// Builds cell summaries from ordered run outcomes and writes runs/summary/best CSVs.
SweepSummary assemble(const ExperimentConfig& cfg, std::vector<RunOutcome> runs) {
    SweepSummary summary;
    summary.runs = std::move(runs);
    for (const auto& m : cfg.methods) {
        summary.labels.push_back(m.label);
    }
    const auto n_seeds = cfg.seeds.size();
    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        constexpr auto npos = static_cast<std::size_t>(-1);
        std::size_t best_index = npos;
        for (std::size_t si = 0; si < cfg.step_sizes.size(); ++si) {
            CellSummary cell;
            cell.label = cfg.methods[mi].label;
            cell.rule = cfg.methods[mi].optimizer.rule;
            cell.step_size = cfg.step_sizes[si];
            std::vector<double> scores, f5, l5, f5a, l5a;
            for (std::size_t k = 0; k < n_seeds; ++k) {
                const auto& run = summary.runs[(mi * cfg.step_sizes.size() + si) * n_seeds + k];
                ++cell.n_seeds;
                if (run.diverged) {
                    ++cell.n_diverged;
                    continue;
                }
                scores.push_back(run.record.selection_score());
                f5.push_back(run.record.first5_loss);
                l5.push_back(run.record.last5_loss);
                if (run.record.first5_accuracy) {
                    f5a.push_back(*run.record.first5_accuracy);
                    l5a.push_back(*run.record.last5_accuracy);
                }
            }
            cell.mean_score = cell.n_diverged > 0 ? std::numeric_limits<double>::infinity() : mean_of(scores);
            cell.mean_first5_loss = mean_of(f5);
            cell.mean_last5_loss = mean_of(l5);
            if (!f5a.empty()) {
                cell.mean_first5_accuracy = mean_of(f5a);
                cell.mean_last5_accuracy = mean_of(l5a);
            }
            summary.cells.push_back(cell);
            const auto idx = summary.cells.size() - 1;
            if (std::isfinite(cell.mean_score) &&
                (best_index == npos || cell.mean_score < summary.cells[best_index].mean_score)) {
                best_index = idx;
            }
        }
        if (best_index != npos) {
            summary.cells[best_index].best = true;
        }
    }

    csv::Writer runs_csv(cfg.out_dir / "runs.csv",
                         {"label", "rule", "step_size", "seed", "status", "file", "loss_auc", "accuracy_auc",
                          "first5_loss", "last5_loss", "first5_accuracy", "last5_accuracy", "scaling_checks",
                          "scaling_violations", "diagnostic"});
    for (const auto& run : summary.runs) {
        const auto& m = cfg.methods[run.method];
        runs_csv.row({m.label, to_string(m.optimizer.rule), csv::format(cfg.step_sizes[run.step_index]),
                      std::to_string(run.seed), run.diverged ? "diverged" : "ok", run.file,
                      csv::format(run.record.loss_auc), csv::format(run.record.accuracy_auc),
                      csv::format(run.record.first5_loss), csv::format(run.record.last5_loss),
                      csv::format(run.record.first5_accuracy), csv::format(run.record.last5_accuracy),
                      std::to_string(run.scaling_checks), std::to_string(run.scaling_violations),
                      sanitize(run.diagnostic)});
    }
    csv::Writer summary_csv(cfg.out_dir / "summary.csv",
                            {"label", "rule", "step_size", "n_seeds", "n_diverged", "mean_score", "mean_first5_loss",
                             "mean_last5_loss", "mean_first5_accuracy", "mean_last5_accuracy", "best"});
    csv::Writer best_csv(cfg.out_dir / "best.csv", {"label", "rule", "best_step_size", "mean_score"});
    for (const auto& cell : summary.cells) {
        summary_csv.row({cell.label, to_string(cell.rule), csv::format(cell.step_size), std::to_string(cell.n_seeds),
                         std::to_string(cell.n_diverged), csv::format(cell.mean_score),
                         csv::format(cell.mean_first5_loss), csv::format(cell.mean_last5_loss),
                         csv::format(cell.mean_first5_accuracy), csv::format(cell.mean_last5_accuracy),
                         cell.best ? "1" : "0"});
    }
    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        const auto& label = cfg.methods[mi].label;
        const auto it = std::find_if(summary.cells.begin(), summary.cells.end(),
                                     [&](const CellSummary& c) { return c.label == label && c.best; });
        if (it == summary.cells.end()) {
            best_csv.row({label, to_string(cfg.methods[mi].optimizer.rule), "", ""});
        } else {
            best_csv.row({label, to_string(it->rule), csv::format(it->step_size), csv::format(it->mean_score)});
        }
    }
    return summary;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ---- config ----------------------------------------------------------------

std::vector<std::size_t> ExperimentConfig::layer_sizes(std::size_t inputs, std::size_t outputs) const {
    std::vector<std::size_t> sizes{inputs};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(outputs);
    return sizes;
}

void ExperimentConfig::validate(bool check_files) const {
    if (version != kConfigVersion) throw ConfigError("unsupported config version");
    if (step_sizes.empty()) throw ConfigError("step-size grid is empty");
    if (seeds.empty()) throw ConfigError("no seeds");
    if (steps < 1) throw ConfigError("steps must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (methods.empty()) throw ConfigError("no methods");
    for (auto h : hidden) {
        if (h == 0) throw ConfigError("hidden widths must be positive");
    }
    std::vector<std::string> labels;
    for (const auto& m : methods) {
        OptimizerConfig o = m.optimizer;
        o.step_size = 1.0;
        o.validate();
        if (uses_feature_utility(o.rule) && hidden.empty()) {
            throw ConfigError("feature-wise rules need at least one hidden layer");
        }
        if (m.label.empty() || m.label.find_first_of(",/\\ ") != std::string::npos) {
            throw ConfigError("method label '" + m.label + "' must be non-empty without separators");
        }
        if (std::find(labels.begin(), labels.end(), m.label) != labels.end()) {
            throw ConfigError("duplicate method label '" + m.label + "'");
        }
        labels.push_back(m.label);
    }
    for (double s : step_sizes) {
        if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("step sizes must be positive");
    }
    if (const auto* k = std::get_if<PermutedAdder>(&stream); k && (k->n_inputs < 4 || k->n_inputs % 2 != 0)) {
        throw ConfigError("permuted adder needs an even input count of at least 4");
    }
    if (task_period(stream) < 0) throw ConfigError("task period must be positive");
    if (!(probe_step_size > 0.0)) throw ConfigError("probe step size must be positive");
    if (check_files && needs_mnist(stream)) {
        std::filesystem::path dir = mnist_dir;
        if (dir.empty()) {
            const char* env = std::getenv(kMnistDirEnv);
            dir = env != nullptr ? env : "data/mnist";
        }
        if (!std::filesystem::exists(dir / "train-images-idx3-ubyte") ||
            !std::filesystem::exists(dir / "train-labels-idx1-ubyte")) {
            throw ConfigError("MNIST files not found in '" + dir.string() + "' (set mnist_dir or " + kMnistDirEnv +
                              ")");
        }
    }
}

std::vector<std::string> preset_names() {
    return {"quality-probe",       "quality-probe-feature", "changing-adder",
            "permuted-adder",      "stationary-mnist",      "label-permuted-mnist"};
}

ExperimentConfig preset_config(std::string_view name) {
    ExperimentConfig cfg;
    cfg.preset = std::string(name);
    const std::vector<Method> continual{make_method(Rule::sgd), make_method(Rule::anti_pgd),
                                        make_method(Rule::upgd_weight), make_method(Rule::upgd_feature)};
    if (name == "quality-probe" || name == "quality-probe-feature") {
        const bool feature = name == "quality-probe-feature";
        cfg.stream = UtilityProbeAdder{};
        cfg.hidden = feature ? std::vector<std::size_t>{50, 50} : std::vector<std::size_t>{50};
        cfg.activation = Activation::tanh();
        cfg.methods = {make_method(Rule::sgd)};
        cfg.step_sizes = {1e-2};
        cfg.steps = 2000;
        cfg.probe_target = feature ? ProbeTarget::feature : ProbeTarget::weight;
    } else if (name == "changing-adder") {
        cfg.stream = ChangingAdder{16, 100};
        cfg.scaling_check_interval = 10;
        cfg.activation = Activation::identity();
        cfg.methods = continual;
        cfg.steps = 50 * 100;
    } else if (name == "permuted-adder") {
        cfg.stream = PermutedAdder{16, 100};
        cfg.scaling_check_interval = 10;
        cfg.activation = Activation::tanh();
        cfg.methods = continual;
        cfg.steps = 50 * 100;
    } else if (name == "stationary-mnist") {
        cfg.stream = StationaryMnist{};
        cfg.activation = Activation::tanh();
        cfg.methods = {make_method(Rule::sgd),        make_method(Rule::anti_pgd),   make_method(Rule::ups_weight),
                       make_method(Rule::ups_feature), make_method(Rule::upgd_weight), make_method(Rule::upgd_feature)};
        cfg.steps = 20000;
        cfg.scaling_check_interval = 50;
    } else if (name == "label-permuted-mnist") {
        cfg.stream = LabelPermutedMnist{1000, false};
        cfg.activation = Activation::tanh();
        cfg.methods = continual;
        cfg.steps = 20 * 1000;
        cfg.scaling_check_interval = 50;
    } else {
        throw ConfigError("unknown preset '" + std::string(name) + "'");
    }
    for (auto& m : cfg.methods) {
        m.label = default_label(m.optimizer);
    }
    return cfg;
}

ExperimentConfig resolve_config(const std::string& json_text, const ConfigOverrides& overrides) {
    json doc = json::object();
    if (!json_text.empty()) {
        try {
            doc = json::parse(json_text);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!doc.is_object()) {
            throw ConfigError("config must be a JSON object");
        }
    }
    ExperimentConfig cfg;
    std::optional<std::string> preset = overrides.preset;
    if (!preset && doc.contains("preset")) {
        preset = doc.at("preset").get<std::string>();
    }
    if (preset) {
        cfg = preset_config(*preset);
    } else {
        cfg.methods = {make_method(Rule::sgd)};
        cfg.methods.front().label = "sgd";
    }
    try {
        apply_json(cfg, doc);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config field: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    if (overrides.seeds) {
        cfg.seeds.resize(*overrides.seeds);
        std::iota(cfg.seeds.begin(), cfg.seeds.end(), std::uint64_t{0});
    }
    if (overrides.steps) cfg.steps = *overrides.steps;
    if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;
    if (overrides.workers) cfg.workers = *overrides.workers;
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
    return resolve_config(read_text(path), overrides);
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["version"] = cfg.version;
    j["preset"] = cfg.preset;
    j["stream"] = stream_to_json(cfg.stream);
    j["network"] = {{"hidden", cfg.hidden}, {"activation", cfg.activation.name()}};
    j["methods"] = json::array();
    for (const auto& m : cfg.methods) {
        j["methods"].push_back(method_to_json(m));
    }
    j["step_sizes"] = cfg.step_sizes;
    j["seeds"] = cfg.seeds;
    j["steps"] = cfg.steps;
    j["batch_size"] = cfg.batch_size;
    j["out_dir"] = cfg.out_dir.string();
    j["workers"] = cfg.workers;
    j["mnist_dir"] = cfg.mnist_dir;
    j["scaling_check_interval"] = cfg.scaling_check_interval;
    j["probe"] = {{"target", cfg.probe_target == ProbeTarget::weight ? "weight" : "feature"},
                  {"step_size", cfg.probe_step_size},
                  {"burn_in", cfg.probe_burn_in}};
    return j.dump(2) + "\n";
}

std::shared_ptr<const MnistDataset> load_config_mnist(const ExperimentConfig& cfg) {
    std::filesystem::path dir = cfg.mnist_dir;
    if (dir.empty()) {
        const char* env = std::getenv(kMnistDirEnv);
        dir = env != nullptr ? env : "data/mnist";
    }
    return std::make_shared<const MnistDataset>(load_mnist_dir(dir));
}

bool check_scaling_contract(const std::vector<std::vector<double>>& raw, const std::vector<std::vector<double>>& scaled,
                            double eta) {
    std::vector<double> r;
    std::vector<double> s;
    for (const auto& v : raw) r.insert(r.end(), v.begin(), v.end());
    for (const auto& v : scaled) s.insert(s.end(), v.begin(), v.end());
    if (r.size() != s.size()) {
        return false;
    }
    for (double x : s) {
        if (!(x >= 0.0 && x <= 1.0)) {
            return false;
        }
    }
    std::vector<std::pair<double, double>> pairs(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
        pairs[k] = {r[k], s[k]};
    }
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    // Dividing by a negative eta reverses the ordering.
    const bool increasing = !(eta < 0.0);
    for (std::size_t k = 1; k < pairs.size(); ++k) {
        const double prev = pairs[k - 1].second;
        const double cur = pairs[k].second;
        if (increasing ? cur < prev : cur > prev) {
            return false;
        }
    }
    return true;
}

// ---- sweep -----------------------------------------------------------------

bool SweepSummary::partial() const {
    return std::any_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.diverged; });
}

const CellSummary& SweepSummary::best(const std::string& label) const {
    for (const auto& c : cells) {
        if (c.label == label && c.best) {
            return c;
        }
    }
    throw Error("no finite best cell for '" + label + "'");
}

std::vector<const RunOutcome*> SweepSummary::cell_runs(const std::string& label, double step_size) const {
    std::vector<const RunOutcome*> out;
    const auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) {
        return out;
    }
    const auto method = static_cast<std::size_t>(it - labels.begin());
    for (const auto& run : runs) {
        if (run.method == method) {
            const auto& cell = cells[run.method * (cells.size() / labels.size()) + run.step_index];
            if (cell.step_size == step_size) {
                out.push_back(&run);
            }
        }
    }
    return out;
}

SweepSummary run_experiment(const ExperimentConfig& cfg, std::shared_ptr<const MnistDataset> mnist) {
    cfg.validate(!mnist);
    if (needs_mnist(cfg.stream) && !mnist) {
        mnist = load_config_mnist(cfg);
    }
    tune_allocator();
    std::filesystem::create_directories(cfg.out_dir / "runs");
    write_text(cfg.out_dir / "config.json", config_to_json(cfg));

    std::vector<CellJob> jobs;
    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        for (std::size_t s = 0; s < cfg.step_sizes.size(); ++s) {
            for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
                jobs.push_back({m, s, k});
            }
        }
    }
    std::vector<RunOutcome> runs(jobs.size());
    parallel_for(jobs.size(), cfg.workers, [&](std::size_t i) { runs[i] = run_cell(cfg, jobs[i], mnist); });
    return assemble(cfg, std::move(runs));
}

SweepSummary summarize_directory(const std::filesystem::path& dir) {
    ExperimentConfig cfg = resolve_config(read_text(dir / "config.json"));
    cfg.out_dir = dir;
    const auto period = task_period(cfg.stream);
    const auto index = csv::read(dir / "runs.csv");
    const auto col_label = index.column("label");
    const auto col_step = index.column("step_size");
    const auto col_seed = index.column("seed");
    const auto col_status = index.column("status");
    const auto col_file = index.column("file");
    const auto col_checks = index.column("scaling_checks");
    const auto col_viol = index.column("scaling_violations");
    const auto col_diag = index.column("diagnostic");

    std::vector<RunOutcome> runs(index.rows.size());
    for (std::size_t r = 0; r < index.rows.size(); ++r) {
        const auto& row = index.rows[r];
        RunOutcome out;
        const auto label_it = std::find_if(cfg.methods.begin(), cfg.methods.end(),
                                           [&](const Method& m) { return m.label == row[col_label]; });
        if (label_it == cfg.methods.end()) {
            throw Error("runs.csv names unknown method '" + row[col_label] + "'");
        }
        out.method = static_cast<std::size_t>(label_it - cfg.methods.begin());
        const double step = std::stod(row[col_step]);
        const auto step_it = std::find(cfg.step_sizes.begin(), cfg.step_sizes.end(), step);
        if (step_it == cfg.step_sizes.end()) {
            throw Error("runs.csv names a step size outside the grid");
        }
        out.step_index = static_cast<std::size_t>(step_it - cfg.step_sizes.begin());
        out.seed = std::stoull(row[col_seed]);
        out.diverged = row[col_status] == "diverged";
        out.file = row[col_file];
        out.scaling_checks = std::stoll(row[col_checks]);
        out.scaling_violations = std::stoll(row[col_viol]);
        out.diagnostic = col_diag < row.size() ? row[col_diag] : "";

        const auto table = csv::read(dir / out.file);
        const auto c_step = table.column("step");
        const auto c_loss = table.column("loss");
        const auto c_acc = table.column("accuracy");
        std::vector<StepRecord> records;
        records.reserve(table.rows.size());
        for (const auto& line : table.rows) {
            records.push_back({std::stoll(line[c_step]), std::stod(line[c_loss]),
                               csv::parse_optional(c_acc < line.size() ? line[c_acc] : "")});
        }
        out.record = summarize_run(records, period);
        out.record.steps.clear();
        runs[r] = std::move(out);
    }
    // Restore grid order so the summary matches the one written by run_experiment.
    std::stable_sort(runs.begin(), runs.end(), [&](const RunOutcome& a, const RunOutcome& b) {
        if (a.method != b.method) return a.method < b.method;
        if (a.step_index != b.step_index) return a.step_index < b.step_index;
        const auto sa = std::find(cfg.seeds.begin(), cfg.seeds.end(), a.seed);
        const auto sb = std::find(cfg.seeds.begin(), cfg.seeds.end(), b.seed);
        return sa < sb;
    });
    if (runs.size() != cfg.methods.size() * cfg.step_sizes.size() * cfg.seeds.size()) {
        throw Error("runs.csv does not cover the configured grid");
    }
    return assemble(cfg, std::move(runs));
}

// ---- utility-quality probe ---------------------------------------------------

ProbeSummary run_quality_probe(const ExperimentConfig& cfg) {
    cfg.validate();
    std::shared_ptr<const MnistDataset> mnist;
    if (needs_mnist(cfg.stream)) {
        mnist = load_config_mnist(cfg);
    }
    if (cfg.probe_target == ProbeTarget::feature && cfg.hidden.empty()) {
        throw ConfigError("feature probe needs hidden layers");
    }
    tune_allocator();
    std::filesystem::create_directories(cfg.out_dir);
    write_text(cfg.out_dir / "config.json", config_to_json(cfg));

    const bool weights = cfg.probe_target == ProbeTarget::weight;
    ProbeSummary summary;
    summary.columns = weights ? std::vector<std::string>{"second_order", "first_order", "weight_magnitude", "random"}
                              : std::vector<std::string>{"second_order", "first_order", "random"};
    const auto ncol = summary.columns.size();
    summary.seed_means.assign(cfg.seeds.size(), std::vector<double>(ncol, 0.0));
    std::vector<std::int64_t> checks(cfg.seeds.size(), 0);
    std::vector<std::int64_t> violations(cfg.seeds.size(), 0);

    auto rho_or_nan = [](const std::vector<double>& a, const std::vector<double>& b) {
        try {
            return spearman(a, b).rho;
        } catch (const ConstantInput&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };

    parallel_for(cfg.seeds.size(), cfg.workers, [&](std::size_t k) {
        const auto seed = cfg.seeds[k];
        TaskStream stream(cfg.stream, seed, cfg.batch_size, mnist);
        Network net = build_network(cfg.layer_sizes(stream.input_size(), stream.output_size()), cfg.activation,
                                    cfg.loss(), seed);
        OptimizerConfig sgd;
        sgd.rule = Rule::sgd;
        sgd.step_size = cfg.probe_step_size;
        OptimizerState opt(sgd, seed);
        std::seed_seq seq{static_cast<std::uint32_t>(seed), 0x72616e64u};
        std::mt19937_64 rng(seq);

        std::vector<std::string> header{"step", "loss"};
        header.insert(header.end(), summary.columns.begin(), summary.columns.end());
        std::vector<std::string> layer_header{"step", "layer"};
        layer_header.insert(layer_header.end(), summary.columns.begin(), summary.columns.end());
        csv::Writer writer(cfg.out_dir / ("probe_s" + std::to_string(seed) + ".csv"), header);
        csv::Writer layer_writer(cfg.out_dir / ("probe_layers_s" + std::to_string(seed) + ".csv"), layer_header);

        std::vector<double> sums(ncol, 0.0);
        std::vector<std::size_t> counts(ncol, 0);
        for (std::int64_t t = 0; t < cfg.steps; ++t) {
            const Batch batch = stream.next_batch();
            const ForwardTrace fwd = forward(net, batch.inputs, batch.targets);
            const BackwardTrace bwd = backward(net, fwd, batch.targets);

            std::vector<std::vector<std::vector<double>>> global(ncol);  // [column][1][items]
            std::vector<std::vector<std::vector<double>>> per_layer(ncol);
            std::vector<std::vector<double>> truth_global;
            std::vector<std::vector<double>> truth_layers;
            if (weights) {
                const auto truth = true_weight_utility(net, batch.inputs, batch.targets);
                truth_global = flatten_utilities(truth, Scope::global);
                truth_layers = flatten_utilities(truth, Scope::per_layer);
                const auto second = approx_weight_utility(bwd, net, Order::second);
                const std::vector<WeightUtility> estimates{
                    second, approx_weight_utility(bwd, net, Order::first),
                    baseline_utility(Baseline::weight_magnitude, net, rng), baseline_utility(Baseline::random, net, rng)};
                for (std::size_t c = 0; c < ncol; ++c) {
                    global[c] = flatten_utilities(estimates[c], Scope::global);
                    per_layer[c] = flatten_utilities(estimates[c], Scope::per_layer);
                }
                const auto scaled = scale_global(second, Squash::sigmoid);
                ++checks[k];
                if (!check_scaled(second, scaled)) ++violations[k];
            } else {
                const auto truth = true_feature_utility(net, batch.inputs, batch.targets);
                truth_global = flatten_utilities(truth, Scope::global);
                truth_layers = flatten_utilities(truth, Scope::per_layer);
                const auto second = approx_feature_utility(bwd, Order::second);
                const std::vector<FeatureUtility> estimates{second, approx_feature_utility(bwd, Order::first),
                                                            random_feature_utility(net, rng)};
                for (std::size_t c = 0; c < ncol; ++c) {
                    global[c] = flatten_utilities(estimates[c], Scope::global);
                    per_layer[c] = flatten_utilities(estimates[c], Scope::per_layer);
                }
                const auto scaled = scale_global(second, Squash::sigmoid);
                ++checks[k];
                if (!check_scaled(second, scaled)) ++violations[k];
            }

            std::vector<std::string> row{std::to_string(t), csv::format(fwd.loss)};
            for (std::size_t c = 0; c < ncol; ++c) {
                const double rho = rho_or_nan(global[c][0], truth_global[0]);
                row.push_back(csv::format(rho));
                if (t >= cfg.probe_burn_in && std::isfinite(rho)) {
                    sums[c] += rho;
                    ++counts[c];
                }
            }
            writer.row(row);
            for (std::size_t l = 0; l < truth_layers.size(); ++l) {
                std::vector<std::string> lrow{std::to_string(t), std::to_string(l)};
                for (std::size_t c = 0; c < ncol; ++c) {
                    lrow.push_back(csv::format(rho_or_nan(per_layer[c][l], truth_layers[l])));
                }
                layer_writer.row(lrow);
            }
            apply_step(opt, net, bwd, fwd.loss);
        }
        for (std::size_t c = 0; c < ncol; ++c) {
            summary.seed_means[k][c] =
                counts[c] > 0 ? sums[c] / static_cast<double>(counts[c]) : std::numeric_limits<double>::quiet_NaN();
        }
    });

    summary.mean.assign(ncol, 0.0);
    for (std::size_t c = 0; c < ncol; ++c) {
        std::vector<double> v;
        for (const auto& s : summary.seed_means) v.push_back(s[c]);
        summary.mean[c] = mean_of(v);
    }
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        summary.scaling_checks += checks[k];
        summary.scaling_violations += violations[k];
    }

    std::vector<std::string> header{"seed"};
    header.insert(header.end(), summary.columns.begin(), summary.columns.end());
    header.insert(header.end(), {"scaling_checks", "scaling_violations"});
    csv::Writer out(cfg.out_dir / "probe_summary.csv", header);
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        std::vector<std::string> row{std::to_string(cfg.seeds[k])};
        for (double v : summary.seed_means[k]) row.push_back(csv::format(v));
        row.push_back(std::to_string(checks[k]));
        row.push_back(std::to_string(violations[k]));
        out.row(row);
    }
    std::vector<std::string> mean_row{"mean"};
    for (double v : summary.mean) mean_row.push_back(csv::format(v));
    mean_row.push_back(std::to_string(summary.scaling_checks));
    mean_row.push_back(std::to_string(summary.scaling_violations));
    out.row(mean_row);
    return summary;
}

}  // namespace upgd
