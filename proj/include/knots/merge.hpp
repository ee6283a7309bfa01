// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "knots/lora.hpp"

namespace knots {

enum class Method { TA, TIES, DARE_TIES, KNOTS_TIES, KNOTS_DARE_TIES };
enum class ConcatAxis { Columns, Rows };

std::string_view method_name(Method m);
Method method_from_name(std::string_view name);
std::string_view axis_name(ConcatAxis a);
ConcatAxis axis_from_name(std::string_view name);

bool uses_dare(Method m);
bool uses_trim(Method m);
bool uses_knots(Method m);

/// Merge method plus its hyperparameters. Defaults for the pruning knobs are
/// the customary TIES top-k (30%) and DARE drop rate (0.9).
struct MergeConfig {
    Method method = Method::TA;
    double alpha = 1.0;
    double topk_percent = 30.0;
    double dare_p = 0.9;
    /// The first seed drives a single merge; sweeps visit them all.
    std::vector<std::uint64_t> seeds = {420};
    ConcatAxis concat_axis = ConcatAxis::Columns;
    /// Singular values at or below rank_tol·σ₁ are discarded by KnOTS.
    double rank_tol = 1e-8;

    /// Throws InvalidConfig / InvalidProbability on out-of-range fields.
    void validate() const;
    std::uint64_t seed() const { return seeds.empty() ? 0 : seeds.front(); }

    bool operator==(const MergeConfig&) const = default;
};

void to_json(nlohmann::json& j, const MergeConfig& c);
void from_json(const nlohmann::json& j, MergeConfig& c);

struct MergedUpdate {
    std::map<std::string, Matrix> layers;
    MergeConfig config;
    std::vector<std::string> sources;
    /// Retained rank per layer for KnOTS merges; empty otherwise.
    std::map<std::string, int> knots_rank;

    TaskUpdate as_update() const;
};

/// α · Σᵢ ΔWᵢ per layer, summed in input order.
MergedUpdate merge_ta(const std::vector<TaskUpdate>& updates, double alpha);

/// Keep-mask of the ⌈topk/100 · N⌉ largest-magnitude entries, ranked over the
/// row-major flattening; magnitude ties keep the lower flat index.
Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> trim_mask(const Matrix& m, double topk_percent);

/// Number of entries trim_mask keeps for an N-entry matrix.
std::size_t trim_keep_count(std::size_t n, double topk_percent);

Matrix ties_trim(const Matrix& m, double topk_percent);

/// sign(Σ values), with an exact zero sum electing +1.
int sign_elect(std::span<const double> values);

/// Sign election followed by the disjoint mean over nonzero, sign-agreeing
/// entries. Coordinates without survivors are 0. No scaling applied.
Matrix elect_and_disjoint_mean(std::span<const Matrix> matrices);

MergedUpdate ties_merge(const std::vector<TaskUpdate>& updates, double alpha, double topk_percent);

/// Per-model DARE seed: seed ⊕ FNV-1a(source_id).
std::uint64_t model_seed(std::uint64_t seed, std::string_view source_id);

/// Drops each entry with probability p and rescales survivors by 1/(1−p).
/// The draw for an entry depends only on (seed, key, row-major index).
Matrix dare_drop(const Matrix& m, double p, std::uint64_t seed, std::string_view key);

TaskUpdate dare_transform(const TaskUpdate& update, double p, std::uint64_t seed);

/// DARE on every update (sub-seeded via model_seed), then sign election and
/// disjoint mean without magnitude trimming, scaled by α.
MergedUpdate dare_ties_merge(const std::vector<TaskUpdate>& updates, double alpha, double p, std::uint64_t seed);

}  // namespace knots
