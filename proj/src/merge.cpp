// SPDX-License-Identifier: Apache-2.0

#include "knots/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "knots/error.hpp"
#include "knots/parallel.hpp"
#include "knots/rng.hpp"

namespace knots {

std::string_view method_name(Method m) {
    switch (m) {
        case Method::TA: return "TA";
        case Method::TIES: return "TIES";
        case Method::DARE_TIES: return "DARE_TIES";
        case Method::KNOTS_TIES: return "KNOTS_TIES";
        case Method::KNOTS_DARE_TIES: return "KNOTS_DARE_TIES";
    }
    return "?";
}

Method method_from_name(std::string_view name) {
    for (Method m : {Method::TA, Method::TIES, Method::DARE_TIES, Method::KNOTS_TIES, Method::KNOTS_DARE_TIES})
        if (method_name(m) == name) return m;
    throw Error(ErrorKind::InvalidConfig, fmt::format("unknown merge method '{}'", name));
}

std::string_view axis_name(ConcatAxis a) { return a == ConcatAxis::Columns ? "columns" : "rows"; }

ConcatAxis axis_from_name(std::string_view name) {
    if (name == "columns") return ConcatAxis::Columns;
    if (name == "rows") return ConcatAxis::Rows;
    throw Error(ErrorKind::InvalidConfig, fmt::format("unknown concat_axis '{}'", name));
}

bool uses_dare(Method m) { return m == Method::DARE_TIES || m == Method::KNOTS_DARE_TIES; }
bool uses_trim(Method m) { return m == Method::TIES || m == Method::KNOTS_TIES; }
bool uses_knots(Method m) { return m == Method::KNOTS_TIES || m == Method::KNOTS_DARE_TIES; }

namespace {

void check_probability(double p) {
    if (!(p >= 0.0 && p < 1.0))
        throw Error(ErrorKind::InvalidProbability, fmt::format("drop probability {} outside [0, 1)", p));
}

void check_topk(double topk) {
    if (!(topk > 0.0 && topk <= 100.0))
        throw Error(ErrorKind::InvalidConfig, fmt::format("topk_percent {} outside (0, 100]", topk));
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
        throw Error(ErrorKind::InvalidConfig, fmt::format("alpha {} must be a finite nonnegative number", alpha));
}

std::vector<std::string> layer_keys(const std::vector<TaskUpdate>& updates) {
    std::vector<std::string> keys;
    for (const auto& [k, _] : updates.front().layers) keys.push_back(k);
    return keys;
}

std::vector<std::string> source_ids(const std::vector<TaskUpdate>& updates) {
    std::vector<std::string> ids;
    for (const auto& u : updates) ids.push_back(u.source_id);
    return ids;
}

/// Runs `per_layer(key)` over every layer of the (already validated) updates.
template <typename Fn>
std::map<std::string, Matrix> map_layers(const std::vector<TaskUpdate>& updates, Fn&& per_layer) {
    const auto keys = layer_keys(updates);
    std::vector<Matrix> results(keys.size());
    parallel_for(keys.size(), [&](std::size_t i) { results[i] = per_layer(keys[i]); });
    std::map<std::string, Matrix> out;
    for (std::size_t i = 0; i < keys.size(); ++i) out.emplace(keys[i], std::move(results[i]));
    return out;
}

}  // namespace

void MergeConfig::validate() const {
    check_alpha(alpha);
    check_topk(topk_percent);
    check_probability(dare_p);
    if (!(rank_tol >= 0.0 && rank_tol < 1.0))
        throw Error(ErrorKind::InvalidConfig, fmt::format("rank_tol {} outside [0, 1)", rank_tol));
    if (uses_dare(method) && seeds.empty())
        throw Error(ErrorKind::InvalidConfig, fmt::format("{} needs at least one seed", method_name(method)));
}

void to_json(nlohmann::json& j, const MergeConfig& c) {
    j = nlohmann::json{{"method", method_name(c.method)},
                       {"alpha", c.alpha},
                       {"topk_percent", c.topk_percent},
                       {"dare_p", c.dare_p},
                       {"seeds", c.seeds},
                       {"concat_axis", axis_name(c.concat_axis)},
                       {"rank_tol", c.rank_tol}};
}

void from_json(const nlohmann::json& j, MergeConfig& c) {
    if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, "merge config must be a JSON object");
    static const std::vector<std::string> known = {"method",  "alpha",       "topk_percent", "dare_p",
                                                   "seeds",   "concat_axis", "rank_tol"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw Error(ErrorKind::InvalidConfig, fmt::format("unknown merge field '{}'", it.key()));
    try {
        if (j.contains("method")) c.method = method_from_name(j.at("method").get<std::string>());
        if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
        if (j.contains("topk_percent")) c.topk_percent = j.at("topk_percent").get<double>();
        if (j.contains("dare_p")) c.dare_p = j.at("dare_p").get<double>();
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("concat_axis")) c.concat_axis = axis_from_name(j.at("concat_axis").get<std::string>());
        if (j.contains("rank_tol")) c.rank_tol = j.at("rank_tol").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, fmt::format("merge config: {}", e.what()));
    }
}

TaskUpdate MergedUpdate::as_update() const {
    TaskUpdate u;
    u.layers = layers;
    u.source_id = "merged";
    return u;
}

MergedUpdate merge_ta(const std::vector<TaskUpdate>& updates, double alpha) {
    require_compatible(updates);
    check_alpha(alpha);
    MergedUpdate out;
    out.config.method = Method::TA;
    out.config.alpha = alpha;
    out.sources = source_ids(updates);
    out.layers = map_layers(updates, [&](const std::string& key) {
        Matrix sum = updates.front().layers.at(key);
        for (std::size_t i = 1; i < updates.size(); ++i) sum += updates[i].layers.at(key);
        return Matrix(alpha * sum);
    });
    return out;
}

std::size_t trim_keep_count(std::size_t n, double topk_percent) {
    check_topk(topk_percent);
    // The epsilon absorbs representation error in e.g. 30·10/100.
    const double exact = topk_percent * static_cast<double>(n) / 100.0;
    const auto keep = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    return std::min(keep, n);
}

Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> trim_mask(const Matrix& m, double topk_percent) {
    const std::size_t n = static_cast<std::size_t>(m.size());
    const std::size_t keep = trim_keep_count(n, topk_percent);
    const auto cols = m.cols();
    auto at = [&](std::size_t flat) { return std::abs(m(static_cast<Eigen::Index>(flat) / cols,
                                                        static_cast<Eigen::Index>(flat) % cols)); };

    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask(m.rows(), m.cols());
    if (keep == n) {
        mask.setConstant(true);
        return mask;
    }
    mask.setConstant(false);
    if (keep == 0) return mask;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        const double ma = at(a), mb = at(b);
        return ma != mb ? ma > mb : a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(), before);
    for (std::size_t i = 0; i < keep; ++i) {
        const auto flat = static_cast<Eigen::Index>(order[i]);
        mask(flat / cols, flat % cols) = true;
    }
    return mask;
}

Matrix ties_trim(const Matrix& m, double topk_percent) {
    const auto mask = trim_mask(m, topk_percent);
    return mask.select(m, Matrix::Zero(m.rows(), m.cols()));
}

int sign_elect(std::span<const double> values) {
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum < 0.0 ? -1 : 1;
}

Matrix elect_and_disjoint_mean(std::span<const Matrix> matrices) {
    if (matrices.empty()) throw Error(ErrorKind::EmptyInput, "nothing to merge");
    const auto rows = matrices.front().rows();
    const auto cols = matrices.front().cols();
    Matrix out = Matrix::Zero(rows, cols);
    std::vector<double> column(matrices.size());
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (std::size_t t = 0; t < matrices.size(); ++t) column[t] = matrices[t](i, j);
            const int sign = sign_elect(column);
            double sum = 0.0;
            int count = 0;
            for (double v : column) {
                if (v != 0.0 && (v > 0.0) == (sign > 0)) {
                    sum += v;
                    ++count;
                }
            }
            out(i, j) = count > 0 ? sum / count : 0.0;
        }
    }
    return out;
}

MergedUpdate ties_merge(const std::vector<TaskUpdate>& updates, double alpha, double topk_percent) {
    require_compatible(updates);
    check_alpha(alpha);
    check_topk(topk_percent);
    MergedUpdate out;
    out.config.method = Method::TIES;
    out.config.alpha = alpha;
    out.config.topk_percent = topk_percent;
    out.sources = source_ids(updates);
    out.layers = map_layers(updates, [&](const std::string& key) {
        std::vector<Matrix> trimmed;
        trimmed.reserve(updates.size());
        for (const auto& u : updates) trimmed.push_back(ties_trim(u.layers.at(key), topk_percent));
        return Matrix(alpha * elect_and_disjoint_mean(trimmed));
    });
    return out;
}

std::uint64_t model_seed(std::uint64_t seed, std::string_view source_id) { return seed ^ fnv1a(source_id); }

Matrix dare_drop(const Matrix& m, double p, std::uint64_t seed, std::string_view key) {
    check_probability(p);
    if (p == 0.0) return m;
    const KeyedUniform uniform(seed, key);
    const double rescale = 1.0 / (1.0 - p);
    Matrix out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const auto flat = static_cast<std::uint64_t>(i * m.cols() + j);
            out(i, j) = uniform(flat) < p ? 0.0 : m(i, j) * rescale;
        }
    return out;
}

TaskUpdate dare_transform(const TaskUpdate& update, double p, std::uint64_t seed) {
    check_probability(p);
    TaskUpdate out;
    out.source_id = update.source_id;
    for (const auto& [key, m] : update.layers) out.layers.emplace(key, dare_drop(m, p, seed, key));
    return out;
}

MergedUpdate dare_ties_merge(const std::vector<TaskUpdate>& updates, double alpha, double p, std::uint64_t seed) {
    require_compatible(updates);
    check_alpha(alpha);
    check_probability(p);
    MergedUpdate out;
    out.config.method = Method::DARE_TIES;
    out.config.alpha = alpha;
    out.config.dare_p = p;
    out.config.seeds = {seed};
    out.sources = source_ids(updates);
    out.layers = map_layers(updates, [&](const std::string& key) {
        std::vector<Matrix> dropped;
        dropped.reserve(updates.size());
        for (const auto& u : updates)
            dropped.push_back(dare_drop(u.layers.at(key), p, model_seed(seed, u.source_id), key));
        return Matrix(alpha * elect_and_disjoint_mean(dropped));
    });
    return out;
}

}  // namespace knots
