// SPDX-License-Identifier: Apache-2.0

#include <map>
#include <tuple>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "knots/error.hpp"
#include "knots/eval.hpp"
#include "knots/knots.hpp"

namespace knots {

SweepGrids SweepGrids::defaults() {
    SweepGrids g;
    g.alpha = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    g.topk_percent = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
    g.dare_p = {0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1};
    g.seeds = {420, 421, 422, 423, 424};
    return g;
}

void to_json(nlohmann::json& j, const SweepGrids& g) {
    j = nlohmann::json{{"alpha", g.alpha},
                       {"topk_percent", g.topk_percent},
                       {"dare_p", g.dare_p},
                       {"seeds", g.seeds},
                       {"default_topk", g.default_topk},
                       {"default_p", g.default_p}};
}

void from_json(const nlohmann::json& j, SweepGrids& g) {
    g = SweepGrids::defaults();
    try {
        if (j.contains("alpha")) g.alpha = j.at("alpha").get<std::vector<double>>();
        if (j.contains("topk_percent")) g.topk_percent = j.at("topk_percent").get<std::vector<double>>();
        if (j.contains("dare_p")) g.dare_p = j.at("dare_p").get<std::vector<double>>();
        if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("default_topk")) g.default_topk = j.at("default_topk").get<double>();
        if (j.contains("default_p")) g.default_p = j.at("default_p").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::InvalidGrid, fmt::format("sweep grids: {}", e.what()));
    }
}

namespace {

nlohmann::json point_json(const SweepPoint& p) {
    return nlohmann::json{{"phase", p.phase}, {"config", p.config}, {"score", p.score}};
}

/// True when `a` should replace `b` as the incumbent.
bool better(const SweepPoint& a, const SweepPoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.config.alpha != b.config.alpha) return a.config.alpha < b.config.alpha;
    const double pa = pruning_value(a.config), pb = pruning_value(b.config);
    if (pa != pb) return pa < pb;
    return a.config.seed() < b.config.seed();
}

const SweepPoint& best_of(const std::vector<SweepPoint>& points) {
    const SweepPoint* best = &points.front();
    for (const auto& p : points)
        if (better(p, *best)) best = &p;
    return *best;
}

class Evaluator {
public:
    explicit Evaluator(const SweepSetup& setup) : setup_(setup) {
        if (setup.tasks.empty()) throw Error(ErrorKind::EmptyInput, "sweep needs at least one validation task");
        if (setup.objective == SweepObjective::PerTaskNormalized) {
            if (setup.tasks.size() != setup.updates.size())
                throw Error(ErrorKind::InvalidConfig,
                            fmt::format("per-task sweeps pair tasks with updates, got {} tasks and {} updates",
                                        setup.tasks.size(), setup.updates.size()));
            for (std::size_t i = 0; i < setup.tasks.size(); ++i)
                finetuned_.push_back(evaluate(apply_update(setup.base, setup.updates[i]), setup.tasks[i], setup.forward));
        } else {
            joint_ = build_joint_space(setup.tasks).task;
        }
    }

    double score(const MergedUpdate& merged) const {
        const TensorMap weights = apply_update(setup_.base, merged.as_update());
        if (setup_.objective == SweepObjective::JointHits1)
            return hits_at_k_rate(compute_logits(weights, joint_, setup_.forward), joint_.labels, 1);
        double sum = 0.0;
        for (std::size_t i = 0; i < setup_.tasks.size(); ++i)
            sum += normalized_accuracy(evaluate(weights, setup_.tasks[i], setup_.forward), finetuned_[i]);
        return sum / static_cast<double>(setup_.tasks.size());
    }

private:
    const SweepSetup& setup_;
    std::vector<double> finetuned_;
    EvalTask joint_;
};

}  // namespace

double pruning_value(const MergeConfig& c) {
    if (uses_trim(c.method)) return c.topk_percent;
    if (uses_dare(c.method)) return c.dare_p;
    return 0.0;
}

double sweep_objective(const SweepSetup& setup, const MergedUpdate& merged) {
    return Evaluator(setup).score(merged);
}

SweepResult sweep(const SweepSetup& setup) {
    const Method method = setup.config.method;
    const bool trims = uses_trim(method);
    const bool dares = uses_dare(method);
    const SweepGrids& g = setup.grids;
    if (g.alpha.empty()) throw Error(ErrorKind::InvalidGrid, "alpha grid is empty");
    if (trims && g.topk_percent.empty()) throw Error(ErrorKind::InvalidGrid, "topk_percent grid is empty");
    if (dares && g.dare_p.empty()) throw Error(ErrorKind::InvalidGrid, "dare_p grid is empty");
    if (dares && g.seeds.empty()) throw Error(ErrorKind::InvalidGrid, "seed grid is empty");

    const std::vector<double>& pruning_grid = trims ? g.topk_percent : g.dare_p;
    const double default_pruning = trims ? g.default_topk : g.default_p;
    // A default outside the grid would add an off-grid point; fall back to the
    // grid's first entry instead.
    double alpha_pass_pruning = 0.0;
    if (trims || dares) {
        alpha_pass_pruning = pruning_grid.front();
        for (double v : pruning_grid)
            if (v == default_pruning) alpha_pass_pruning = v;
    }
    const std::vector<std::uint64_t> seeds = dares ? g.seeds : std::vector<std::uint64_t>{setup.config.seed()};

    const Evaluator evaluator(setup);
    SweepResult result;
    result.grids = g;
    std::map<std::tuple<double, double, std::uint64_t>, double> cache;

    auto make_config = [&](double alpha, double pruning, std::uint64_t seed) {
        MergeConfig c = setup.config;
        c.alpha = alpha;
        if (trims) c.topk_percent = pruning;
        if (dares) {
            c.dare_p = pruning;
            c.seeds = {seed};
        }
        return c;
    };
    auto visit = [&](double alpha, double pruning, std::uint64_t seed, const char* phase,
                     std::vector<SweepPoint>& trace) {
        SweepPoint p{make_config(alpha, pruning, seed), 0.0, phase};
        const auto key = std::make_tuple(alpha, (trims || dares) ? pruning : 0.0, dares ? seed : 0);
        auto hit = cache.find(key);
        if (hit != cache.end()) {
            // Revisits are only recorded by the exhaustive pass.
            if (&trace == &result.search_trace) return;
            p.score = hit->second;
        } else {
            p.score = evaluator.score(merge_updates(setup.updates, p.config));
            cache.emplace(key, p.score);
            ++result.evaluations;
        }
        trace.push_back(std::move(p));
    };

    for (double alpha : g.alpha)
        for (auto seed : seeds) visit(alpha, alpha_pass_pruning, seed, "alpha", result.search_trace);
    if (trims || dares) {
        const double best_alpha = best_of(result.search_trace).config.alpha;
        for (double pruning : pruning_grid)
            for (auto seed : seeds) visit(best_alpha, pruning, seed, "pruning", result.search_trace);
    }
    const SweepPoint& best = best_of(result.search_trace);
    result.best = best.config;
    result.best_score = best.score;

    if (setup.exhaustive) {
        const std::vector<double> prunings = (trims || dares) ? pruning_grid : std::vector<double>{0.0};
        for (double alpha : g.alpha)
            for (double pruning : prunings)
                for (auto seed : seeds) visit(alpha, pruning, seed, "exhaustive", result.exhaustive_trace);
        const SweepPoint& ex = best_of(result.exhaustive_trace);
        result.exhaustive_best = ex.config;
        result.exhaustive_score = ex.score;
    }
    return result;
}

void to_json(nlohmann::json& j, const SweepResult& r) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& p : r.search_trace) trace.push_back(point_json(p));
    j = nlohmann::json{{"grids", r.grids},
                       {"search_trace", std::move(trace)},
                       {"best", r.best},
                       {"best_score", r.best_score},
                       {"evaluations", r.evaluations}};
    if (r.exhaustive_best) {
        nlohmann::json ex = nlohmann::json::array();
        for (const auto& p : r.exhaustive_trace) ex.push_back(point_json(p));
        j["exhaustive"] = {{"trace", std::move(ex)}, {"best", *r.exhaustive_best}, {"best_score", r.exhaustive_score}};
    }
}

}  // namespace knots
