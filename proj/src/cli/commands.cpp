// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdlib>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "knots/analysis.hpp"
#include "knots/cli.hpp"
#include "knots/error.hpp"
#include "knots/eval.hpp"
#include "knots/knots.hpp"
#include "knots/parallel.hpp"

namespace knots::cli {

namespace {

using nlohmann::json;

struct GlobalOptions {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<unsigned> threads;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    bool csv = false;
    bool exhaustive = false;
};

// --- config accessors ------------------------------------------------------

template <typename T>
T get_or(const RunConfig& cfg, const std::string& dotted, T fallback) {
    const json* v = cfg.find(dotted);
    if (!v) return fallback;
    try {
        return v->get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, fmt::format("config '{}': {}", dotted, e.what()));
    }
}

template <typename T>
T require(const RunConfig& cfg, const std::string& dotted) {
    const json* v = cfg.find(dotted);
    if (!v) throw Error(ErrorKind::InvalidConfig, fmt::format("config lacks '{}'", dotted));
    return get_or<T>(cfg, dotted, T{});
}

std::filesystem::path existing_input(const RunConfig& cfg, const std::string& p) {
    auto path = cfg.resolve(p);
    if (!std::filesystem::is_regular_file(path))
        throw Error(ErrorKind::InvalidConfig, fmt::format("input file '{}' does not exist", p));
    return path;
}

std::filesystem::path output_path(const RunConfig& cfg, const std::string& dotted) {
    auto path = cfg.resolve(require<std::string>(cfg, dotted));
    const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    if (!std::filesystem::is_directory(dir))
        throw Error(ErrorKind::InvalidConfig, fmt::format("output directory '{}' does not exist", dir.string()));
    return path;
}

/// Records input files with their digests, in config order.
class Inputs {
public:
    explicit Inputs(const RunConfig& cfg) : cfg_(cfg) {}

    std::filesystem::path add(const std::string& p) {
        auto path = existing_input(cfg_, p);
        digests_.push_back({{"path", p}, {"sha256", sha256_hex(path)}});
        return path;
    }
    const json& digests() const { return digests_; }

private:
    const RunConfig& cfg_;
    json digests_ = json::array();
};

MergeConfig merge_config(const RunConfig& cfg) {
    MergeConfig c;
    if (const json* m = cfg.find("merge")) c = m->get<MergeConfig>();
    c.validate();
    return c;
}

std::vector<TaskUpdate> load_updates(const RunConfig& cfg, Inputs& inputs) {
    const auto paths = get_or<std::vector<std::string>>(cfg, "adapters", {});
    if (paths.empty()) throw Error(ErrorKind::EmptyInput, "config lists no adapters");
    const auto convention = KeyConvention::by_name(get_or<std::string>(cfg, "key_convention", "lora"));
    std::vector<TaskUpdate> updates;
    for (const auto& p : paths) updates.push_back(materialize_update(load_adapter(inputs.add(p), convention)));
    require_compatible(updates);
    return updates;
}

std::uint64_t global_seed(const RunConfig& cfg) { return get_or<std::uint64_t>(cfg, "seed", 0); }

std::vector<EvalTask> load_tasks(const RunConfig& cfg, Inputs& inputs) {
    const auto paths = get_or<std::vector<std::string>>(cfg, "eval.tasks", {});
    if (paths.empty()) throw Error(ErrorKind::EmptyInput, "config lists no eval.tasks");
    std::vector<EvalTask> tasks;
    for (const auto& p : paths) tasks.push_back(load_eval_task(inputs.add(p)));
    return tasks;
}

ForwardSpec forward_spec(const RunConfig& cfg) {
    const json* f = cfg.find("eval.forward");
    if (!f) throw Error(ErrorKind::InvalidConfig, "config lacks 'eval.forward'");
    return f->get<ForwardSpec>();
}

bool joint_mode(const RunConfig& cfg) {
    const auto mode = get_or<std::string>(cfg, "eval.mode", "per_task");
    if (mode == "joint") return true;
    if (mode == "per_task") return false;
    throw Error(ErrorKind::InvalidConfig, fmt::format("eval.mode '{}' must be per_task or joint", mode));
}

std::string report_text(const json& j) { return j.dump(2) + "\n"; }

std::filesystem::path with_suffix(std::filesystem::path p, const std::string& suffix) {
    p.replace_extension(suffix);
    return p;
}

// --- commands --------------------------------------------------------------

int cmd_merge(const RunConfig& cfg, const GlobalOptions& opts, std::ostream& out) {
    Inputs inputs(cfg);
    const MergeConfig config = merge_config(cfg);
    const auto updates = load_updates(cfg, inputs);
    const TensorMap base = load_tensor_map(inputs.add(require<std::string>(cfg, "base")));
    const auto output = output_path(cfg, "output");
    const auto report_path = cfg.find("report") ? output_path(cfg, "report") : with_suffix(output, ".report.json");

    const MergedUpdate merged = merge_updates(updates, config);
    TensorMap result = apply_update(base, merged.as_update());
    result.metadata["merge_config"] = json(config).dump();

    json layers = json::object();
    for (const auto& [key, m] : merged.layers) {
        json entry = {{"frobenius_norm", m.norm()}};
        if (auto k = merged.knots_rank.find(key); k != merged.knots_rank.end()) entry["knots_rank"] = k->second;
        layers[key] = std::move(entry);
    }
    json report = {{"command", "merge"}, {"merge", config},   {"sources", merged.sources},
                   {"inputs", inputs.digests()}, {"output", require<std::string>(cfg, "output")},
                   {"layers", std::move(layers)}};
    if (uses_knots(config.method)) {
        MergeConfig baseline = config;
        baseline.method = config.method == Method::KNOTS_TIES ? Method::TIES : Method::DARE_TIES;
        const MergedUpdate plain = merge_updates(updates, baseline);
        json gaps = json::object();
        for (const auto& [key, m] : merged.layers) gaps[key] = (m - plain.layers.at(key)).norm();
        report["baseline"] = {{"method", method_name(baseline.method)}, {"frobenius_gap", std::move(gaps)}};
    }

    save_tensor_map(result, output);
    write_file_atomic(report_path, report_text(report));
    if (!opts.quiet)
        out << fmt::format("merged {} adapter(s) with {} into {}\n", updates.size(), method_name(config.method),
                           output.string());
    return 0;
}

int cmd_cka(const RunConfig& cfg, const GlobalOptions& opts, std::ostream& out) {
    Inputs inputs(cfg);
    const auto report_path = output_path(cfg, "report");
    const json* probe_cfg = cfg.find("probe");
    if (!probe_cfg) throw Error(ErrorKind::MissingProbe, "config lacks a 'probe' section");

    std::vector<CkaMode> modes;
    for (const auto& name : get_or<std::vector<std::string>>(cfg, "cka.modes", {"raw_update"}))
        modes.push_back(cka_mode_from_name(name));
    const double rank_tol = get_or<double>(cfg, "merge.rank_tol", MergeConfig{}.rank_tol);
    const bool needs_updates = std::any_of(modes.begin(), modes.end(), [](CkaMode m) { return m != CkaMode::FftDelta; });
    const bool needs_checkpoints = std::any_of(modes.begin(), modes.end(), [](CkaMode m) { return m == CkaMode::FftDelta; });

    std::vector<TaskUpdate> updates;
    if (needs_updates) updates = load_updates(cfg, inputs);
    TensorMap base;
    std::vector<TensorMap> finetuned;
    std::vector<std::string> sources;
    std::vector<std::string> keys;
    if (needs_checkpoints) {
        base = load_tensor_map(inputs.add(require<std::string>(cfg, "base")));
        for (const auto& p : require<std::vector<std::string>>(cfg, "finetuned")) {
            finetuned.push_back(load_tensor_map(inputs.add(p)));
            sources.push_back(std::filesystem::path(p).stem().string());
        }
        keys = get_or<std::vector<std::string>>(cfg, "cka.layers", {});
        if (keys.empty()) {
            if (!updates.empty())
                for (const auto& [k, _] : updates.front().layers) keys.push_back(k);
            else
                for (const auto& [k, t] : base.entries)
                    if (t.shape.size() == 2) keys.push_back(k);
        }
    }

    const std::string kind = get_or<std::string>(cfg, "probe.kind", "gaussian");
    ProbeSet probes;
    if (kind == "file") {
        const std::string p = require<std::string>(cfg, "probe.path");
        probes = probes_from_tensor_map(load_tensor_map(inputs.add(p)), p);
    } else if (kind == "gaussian") {
        TaskUpdate shapes;
        if (!updates.empty()) {
            shapes = updates.front();
        } else {
            for (const auto& k : keys) shapes.layers.emplace(k, Matrix::Zero(1, base.at(k).cols()));
        }
        probes = gaussian_probes(shapes, get_or<int>(cfg, "probe.m", 256),
                                 get_or<std::uint64_t>(cfg, "probe.seed", global_seed(cfg)));
    } else {
        throw Error(ErrorKind::InvalidConfig, fmt::format("probe.kind '{}' must be gaussian or file", kind));
    }

    std::vector<CkaReport> reports;
    for (CkaMode mode : modes) {
        if (mode == CkaMode::FftDelta)
            reports.push_back(pairwise_checkpoint_cka(base, finetuned, sources, keys, probes));
        else
            reports.push_back(pairwise_update_cka(updates, probes, mode, rank_tol));
    }

    json doc = {{"command", "cka"}, {"reports", reports}, {"inputs", inputs.digests()}};
    write_file_atomic(report_path, report_text(doc));
    if (opts.csv)
        for (const auto& r : reports)
            write_file_atomic(with_suffix(report_path, fmt::format(".{}.csv", cka_mode_name(r.mode))), summary_csv(r));
    if (!opts.quiet)
        for (const auto& r : reports)
            out << fmt::format("{}: mean off-diagonal CKA {:.6f}\n", cka_mode_name(r.mode), r.mean_off_diagonal());
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const GlobalOptions& opts, std::ostream& out) {
    Inputs inputs(cfg);
    const auto report_path = output_path(cfg, "report");
    std::optional<std::filesystem::path> best_output;
    if (cfg.find("output")) best_output = output_path(cfg, "output");

    SweepSetup setup;
    setup.config = merge_config(cfg);
    setup.updates = load_updates(cfg, inputs);
    setup.base = load_tensor_map(inputs.add(require<std::string>(cfg, "base")));
    setup.forward = forward_spec(cfg);
    const std::uint64_t split_seed = get_or<std::uint64_t>(cfg, "eval.split_seed", global_seed(cfg));
    for (auto& task : load_tasks(cfg, inputs))
        setup.tasks.push_back(task.split == Split::Validation ? std::move(task)
                                                               : split_validation(task, split_seed).validation);
    setup.objective = joint_mode(cfg) ? SweepObjective::JointHits1 : SweepObjective::PerTaskNormalized;
    const auto metric = get_or<std::string>(cfg, "eval.metric", "");
    if (metric == "hits_at_1")
        setup.objective = SweepObjective::JointHits1;
    else if (metric == "normalized_accuracy")
        setup.objective = SweepObjective::PerTaskNormalized;
    else if (!metric.empty())
        throw Error(ErrorKind::InvalidConfig, fmt::format("eval.metric '{}' is not supported", metric));
    if (const json* g = cfg.find("sweep.grids")) setup.grids = g->get<SweepGrids>();
    setup.exhaustive = opts.exhaustive;

    const SweepResult result = sweep(setup);
    json doc = {{"command", "sweep"},
                {"method", method_name(setup.config.method)},
                {"objective", setup.objective == SweepObjective::JointHits1 ? "hits_at_1" : "normalized_accuracy"},
                {"split_seed", split_seed},
                {"result", result},
                {"inputs", inputs.digests()}};

    std::optional<TensorMap> best_weights;
    if (best_output) {
        best_weights = apply_update(setup.base, merge_updates(setup.updates, result.best).as_update());
        best_weights->metadata["merge_config"] = json(result.best).dump();
    }
    write_file_atomic(report_path, report_text(doc));
    if (best_weights) save_tensor_map(*best_weights, *best_output);
    if (!opts.quiet)
        out << fmt::format("best {} alpha={} score={:.6f} ({} evaluations)\n", method_name(result.best.method),
                           result.best.alpha, result.best_score, result.evaluations);
    return 0;
}

int cmd_eval(const RunConfig& cfg, const GlobalOptions& opts, std::ostream& out) {
    Inputs inputs(cfg);
    const auto report_path = output_path(cfg, "report");
    const MergeConfig config = merge_config(cfg);
    const auto updates = load_updates(cfg, inputs);
    const TensorMap base = load_tensor_map(inputs.add(require<std::string>(cfg, "base")));
    const auto tasks = load_tasks(cfg, inputs);
    const ForwardSpec forward = forward_spec(cfg);
    const TensorMap merged = apply_update(base, merge_updates(updates, config).as_update());

    json doc = {{"command", "eval"}, {"merge", config}, {"inputs", inputs.digests()}};
    std::ostringstream table;
    if (!joint_mode(cfg)) {
        if (tasks.size() != updates.size())
            throw Error(ErrorKind::InvalidConfig, fmt::format("per_task mode pairs tasks with adapters, got {} and {}",
                                                              tasks.size(), updates.size()));
        json rows = json::array();
        table << "task,accuracy,finetuned_accuracy,normalized_accuracy\n";
        double mean = 0.0;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const double acc = evaluate(merged, tasks[i], forward);
            const double ft = evaluate(apply_update(base, updates[i]), tasks[i], forward);
            const double norm = normalized_accuracy(acc, ft);
            mean += norm / static_cast<double>(tasks.size());
            rows.push_back({{"task", tasks[i].name}, {"accuracy", acc}, {"finetuned_accuracy", ft},
                            {"normalized_accuracy", norm}});
            table << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", tasks[i].name, acc, ft, norm);
        }
        doc["mode"] = "per_task";
        doc["rows"] = std::move(rows);
        doc["mean_normalized_accuracy"] = mean;
    } else {
        const JointTask joint = build_joint_space(tasks);
        const Matrix logits = compute_logits(merged, joint.task, forward);
        json rows = json::array();
        table << "k,hits\n";
        for (int k : get_or<std::vector<int>>(cfg, "eval.k_list", {1, 3, 5})) {
            const double hits = hits_at_k_rate(logits, joint.task.labels, k);
            rows.push_back({{"k", k}, {"hits", hits}});
            table << fmt::format("{},{:.6f}\n", k, hits);
        }
        json per_task = json::array();
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const auto begin = joint.offsets[t];
            const auto count = joint.offsets[t + 1] - begin;
            const std::vector<int> labels(joint.task.labels.begin() + begin, joint.task.labels.begin() + begin + count);
            per_task.push_back({{"task", tasks[t].name},
                                {"accuracy", evaluate(merged, tasks[t], forward)},
                                {"joint_hits_at_1", hits_at_k_rate(logits.middleRows(begin, count), labels, 1)}});
        }
        doc["mode"] = "joint";
        doc["union_size"] = joint.space.union_labels.size();
        doc["rows"] = std::move(rows);
        doc["per_task"] = std::move(per_task);
    }

    write_file_atomic(report_path, report_text(doc));
    if (opts.csv) write_file_atomic(with_suffix(report_path, ".csv"), table.str());
    if (!opts.quiet) out << table.str();
    return 0;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
    const TensorMap map = load_tensor_map(path);
    std::ostringstream table;
    table << fmt::format("{:<40} {:<6} {}\n", "key", "dtype", "shape");
    for (const auto& [key, t] : map.entries) {
        std::string shape = "[";
        for (std::size_t i = 0; i < t.shape.size(); ++i) shape += (i ? ", " : "") + std::to_string(t.shape[i]);
        shape += "]";
        table << fmt::format("{:<40} {:<6} {}\n", key, "F32", shape);
    }
    for (const auto& [key, value] : map.metadata) table << fmt::format("metadata {} = {}\n", key, value);
    out << table.str();
    return 0;
}

unsigned threads_from_env() {
    if (const char* env = std::getenv("KNOTS_THREADS")) {
        try {
            return static_cast<unsigned>(std::stoul(env));
        } catch (const std::exception&) {
            throw Error(ErrorKind::InvalidConfig, fmt::format("KNOTS_THREADS='{}' is not a number", env));
        }
    }
    return 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Merge LoRA task updates with KnOTS, TIES, DARE and task arithmetic", "knots"};
    GlobalOptions opts;
    app.option_defaults()->always_capture_default();
    app.add_option("--config", opts.config_path, "JSON run configuration");
    app.add_option("--set", opts.sets, "Override a config field, e.g. merge.alpha=0.3 (repeatable)");
    app.add_option("--threads", opts.threads, "Worker threads (0 = all cores); falls back to KNOTS_THREADS");
    app.add_option("--seed", opts.seed, "Seed for probes and validation splits");
    app.add_flag("--quiet", opts.quiet, "Suppress progress output");
    app.add_flag("--csv", opts.csv, "Also write CSV tables next to JSON reports");
    app.require_subcommand(1);

    auto* merge = app.add_subcommand("merge", "Merge adapters onto a base checkpoint");
    auto* cka = app.add_subcommand("cka", "Pairwise CKA between task-update activations");
    auto* sweep_cmd = app.add_subcommand("sweep", "Hyperparameter search on validation tasks");
    sweep_cmd->add_flag("--exhaustive", opts.exhaustive, "Also evaluate the full grid");
    auto* eval = app.add_subcommand("eval", "Evaluate a merged model per task or on the joint label space");
    auto* inspect = app.add_subcommand("inspect", "List the tensors of a container");
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "Container file")->required();
    for (auto* sub : {merge, cka, sweep_cmd, eval, inspect}) sub->fallthrough();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        set_thread_count(opts.threads ? *opts.threads : threads_from_env());
        if (inspect->parsed()) return cmd_inspect(inspect_path, out);

        if (opts.config_path.empty()) throw Error(ErrorKind::InvalidConfig, "--config is required");
        RunConfig cfg = load_run_config(opts.config_path);
        std::vector<std::string> set_keys;
        for (const auto& s : opts.sets) {
            apply_override(cfg, s);
            set_keys.push_back(s.substr(0, s.find('=')));
        }
        if (opts.seed) {
            if (std::find(set_keys.begin(), set_keys.end(), "seed") != set_keys.end())
                throw Error(ErrorKind::InvalidConfig, "--seed and --set seed=... both given");
            apply_flag(cfg, "seed", *opts.seed, "--seed");
            if (const json* ps = cfg.find("probe.seed"); ps && *ps != json(*opts.seed))
                throw Error(ErrorKind::InvalidConfig,
                            fmt::format("--seed {} conflicts with config probe.seed={}", *opts.seed, ps->dump()));
        }

        if (merge->parsed()) return cmd_merge(cfg, opts, out);
        if (cka->parsed()) return cmd_cka(cfg, opts, out);
        if (sweep_cmd->parsed()) return cmd_sweep(cfg, opts, out);
        if (eval->parsed()) return cmd_eval(cfg, opts, out);
    } catch (const Error& e) {
        err << json{{"error", e.name()}, {"detail", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << json{{"error", "InternalError"}, {"detail", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace knots::cli
