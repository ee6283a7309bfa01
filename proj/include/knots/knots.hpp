// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "knots/merge.hpp"

namespace knots {

/// Joint SVD of n same-shape task updates.
///
/// Column concatenation [ΔW⁽¹⁾ … ΔW⁽ⁿ⁾] = U·diag(S)·[V⁽¹⁾; …; V⁽ⁿ⁾]ᵀ gives one
/// shared left basis U (O×k) and a right block V⁽ⁱ⁾ (I×k) per task, so that
/// ΔW⁽ⁱ⁾ = U·diag(S)·V⁽ⁱ⁾ᵀ. Row stacking is the mirror image: a shared right
/// basis V (I×k) and per-task left blocks U⁽ⁱ⁾ (O×k), ΔW⁽ⁱ⁾ = U⁽ⁱ⁾·diag(S)·Vᵀ.
///
/// Singular-vector pairs are sign-normalized so the largest-magnitude entry
/// of each left singular vector (of the full stacked left factor for rows)
/// is positive, lowest index winning ties.
struct AlignedDecomposition {
    std::string layer_key;
    ConcatAxis axis = ConcatAxis::Columns;
    /// U for columns, V for rows.
    Matrix shared;
    /// Descending, nonnegative.
    Vector singular_values;
    /// V⁽ⁱ⁾ for columns, U⁽ⁱ⁾ for rows; input order.
    std::vector<Matrix> blocks;

    int rank() const { return static_cast<int>(singular_values.size()); }
    std::size_t task_count() const { return blocks.size(); }
    /// The i-th task update rebuilt from the factors.
    Matrix reconstruct(std::size_t i) const;
    /// Rebuilds an update from a merged block laid out like `blocks[i]`.
    Matrix reconstruct_from_block(const Matrix& block) const;
};

/// Singular values at or below max(rank_tol, ε·max(rows, cols))·σ₁ are
/// discarded, so rank_tol = 0 still drops directions that are null to
/// machine precision. An all-zero input yields rank 0.
AlignedDecomposition knots_decompose(std::span<const Matrix> updates, ConcatAxis axis, double rank_tol,
                                     std::string layer_key = {});

/// blocks[i] with column j multiplied by S[j]: the magnitude-carrying view
/// used for pruning decisions.
std::vector<Matrix> sigma_scaled_blocks(const AlignedDecomposition& dec);

enum class InnerRule { TA, TIES, DARE_TIES };

std::string_view inner_rule_name(InnerRule r);

/// Merge in the aligned space, then rebuild ΔW = U·diag(S)·V_mergedᵀ.
///   TA:        V_merged = α·Σ V⁽ⁱ⁾.
///   TIES:      keep-mask from trimming the Σ-scaled blocks, applied to the
///              unscaled blocks; sign election and disjoint mean on those.
///   DARE_TIES: DARE on the unscaled blocks, then election and disjoint mean.
/// Layers whose updates are all zero merge to zero without a decomposition.
MergedUpdate knots_merge(const std::vector<TaskUpdate>& updates, InnerRule inner, const MergeConfig& config);

/// Dispatches on config.method after validating it.
MergedUpdate merge_updates(const std::vector<TaskUpdate>& updates, const MergeConfig& config);

/// Inner rule matching a method (TA→TA, *TIES→TIES, *DARE_TIES→DARE_TIES).
InnerRule inner_rule_for(Method method);

struct AxisComparison {
    MergedUpdate column_result;
    MergedUpdate row_result;
    /// ‖column − row‖_F per layer.
    std::map<std::string, double> frobenius_gap;
};

/// KnOTS merge under both concatenation axes, inner rule taken from config.method.
AxisComparison row_vs_column_compare(const std::vector<TaskUpdate>& updates, const MergeConfig& config);

}  // namespace knots
