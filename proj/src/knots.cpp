// SPDX-License-Identifier: Apache-2.0

#include "knots/knots.hpp"

#include <cmath>
#include <limits>

#include <Eigen/SVD>
#include <fmt/core.h>

#include "knots/error.hpp"
#include "knots/parallel.hpp"

namespace knots {

Matrix AlignedDecomposition::reconstruct(std::size_t i) const { return reconstruct_from_block(blocks.at(i)); }

Matrix AlignedDecomposition::reconstruct_from_block(const Matrix& block) const {
    if (axis == ConcatAxis::Columns) return shared * singular_values.asDiagonal() * block.transpose();
    return block * singular_values.asDiagonal() * shared.transpose();
}

namespace {

void flip_signs(Matrix& left, Matrix& right) {
    for (Eigen::Index j = 0; j < left.cols(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < left.rows(); ++i)
            if (std::abs(left(i, j)) > std::abs(left(best, j))) best = i;
        if (left(best, j) < 0.0) {
            left.col(j) *= -1.0;
            right.col(j) *= -1.0;
        }
    }
}

}  // namespace

AlignedDecomposition knots_decompose(std::span<const Matrix> updates, ConcatAxis axis, double rank_tol,
                                     std::string layer_key) {
    if (updates.empty()) throw Error(ErrorKind::EmptyInput, "no updates to decompose");
    if (!(rank_tol >= 0.0 && rank_tol < 1.0))
        throw Error(ErrorKind::InvalidConfig, fmt::format("rank_tol {} outside [0, 1)", rank_tol));
    const auto out_dim = updates.front().rows();
    const auto in_dim = updates.front().cols();
    for (const auto& m : updates)
        if (m.rows() != out_dim || m.cols() != in_dim)
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}': updates are {}x{} and {}x{}", layer_key,
                                                           out_dim, in_dim, m.rows(), m.cols()));

    const auto n = static_cast<Eigen::Index>(updates.size());
    Matrix stacked = axis == ConcatAxis::Columns ? Matrix(out_dim, n * in_dim) : Matrix(n * out_dim, in_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (axis == ConcatAxis::Columns)
            stacked.middleCols(i * in_dim, in_dim) = updates[static_cast<std::size_t>(i)];
        else
            stacked.middleRows(i * out_dim, out_dim) = updates[static_cast<std::size_t>(i)];
    }

    AlignedDecomposition dec;
    dec.layer_key = std::move(layer_key);
    dec.axis = axis;

    Eigen::BDCSVD<Matrix> svd(stacked, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sigma = svd.singularValues();
    const double floor = std::max(rank_tol, std::numeric_limits<double>::epsilon() *
                                                static_cast<double>(std::max(stacked.rows(), stacked.cols())));
    Eigen::Index k = 0;
    if (sigma.size() > 0 && sigma(0) > 0.0)
        while (k < sigma.size() && sigma(k) > floor * sigma(0)) ++k;

    Matrix left = svd.matrixU().leftCols(k);
    Matrix right = svd.matrixV().leftCols(k);
    flip_signs(left, right);
    dec.singular_values = sigma.head(k);

    if (axis == ConcatAxis::Columns) {
        dec.shared = std::move(left);
        for (Eigen::Index i = 0; i < n; ++i) dec.blocks.push_back(right.middleRows(i * in_dim, in_dim));
    } else {
        dec.shared = std::move(right);
        for (Eigen::Index i = 0; i < n; ++i) dec.blocks.push_back(left.middleRows(i * out_dim, out_dim));
    }
    return dec;
}

std::vector<Matrix> sigma_scaled_blocks(const AlignedDecomposition& dec) {
    std::vector<Matrix> out;
    out.reserve(dec.blocks.size());
    for (const auto& b : dec.blocks) out.push_back(b * dec.singular_values.asDiagonal());
    return out;
}

std::string_view inner_rule_name(InnerRule r) {
    switch (r) {
        case InnerRule::TA: return "TA";
        case InnerRule::TIES: return "TIES";
        case InnerRule::DARE_TIES: return "DARE_TIES";
    }
    return "?";
}

InnerRule inner_rule_for(Method method) {
    switch (method) {
        case Method::TA: return InnerRule::TA;
        case Method::TIES:
        case Method::KNOTS_TIES: return InnerRule::TIES;
        case Method::DARE_TIES:
        case Method::KNOTS_DARE_TIES: return InnerRule::DARE_TIES;
    }
    return InnerRule::TA;
}

MergedUpdate knots_merge(const std::vector<TaskUpdate>& updates, InnerRule inner, const MergeConfig& config) {
    require_compatible(updates);
    config.validate();

    std::vector<std::string> keys;
    for (const auto& [k, _] : updates.front().layers) keys.push_back(k);

    std::vector<Matrix> merged(keys.size());
    std::vector<int> ranks(keys.size(), 0);
    parallel_for(keys.size(), [&](std::size_t li) {
        const std::string& key = keys[li];
        std::vector<Matrix> layer;
        layer.reserve(updates.size());
        bool all_zero = true;
        for (const auto& u : updates) {
            layer.push_back(u.layers.at(key));
            all_zero = all_zero && layer.back().isZero(0.0);
        }
        if (all_zero) {
            merged[li] = Matrix::Zero(layer.front().rows(), layer.front().cols());
            return;
        }

        const auto dec = knots_decompose(layer, config.concat_axis, config.rank_tol, key);
        ranks[li] = dec.rank();

        Matrix block;
        switch (inner) {
            case InnerRule::TA: {
                block = dec.blocks.front();
                for (std::size_t i = 1; i < dec.blocks.size(); ++i) block += dec.blocks[i];
                block *= config.alpha;
                break;
            }
            case InnerRule::TIES: {
                const auto scaled = sigma_scaled_blocks(dec);
                std::vector<Matrix> pruned;
                pruned.reserve(dec.blocks.size());
                for (std::size_t i = 0; i < dec.blocks.size(); ++i) {
                    const auto mask = trim_mask(scaled[i], config.topk_percent);
                    pruned.push_back(mask.select(dec.blocks[i], Matrix::Zero(dec.blocks[i].rows(), dec.blocks[i].cols())));
                }
                block = config.alpha * elect_and_disjoint_mean(pruned);
                break;
            }
            case InnerRule::DARE_TIES: {
                std::vector<Matrix> dropped;
                dropped.reserve(dec.blocks.size());
                for (std::size_t i = 0; i < dec.blocks.size(); ++i)
                    dropped.push_back(dare_drop(dec.blocks[i], config.dare_p,
                                                model_seed(config.seed(), updates[i].source_id), key));
                block = config.alpha * elect_and_disjoint_mean(dropped);
                break;
            }
        }
        merged[li] = dec.reconstruct_from_block(block);
    });

    MergedUpdate out;
    out.config = config;
    switch (inner) {
        case InnerRule::TA: out.config.method = Method::TA; break;
        case InnerRule::TIES: out.config.method = Method::KNOTS_TIES; break;
        case InnerRule::DARE_TIES: out.config.method = Method::KNOTS_DARE_TIES; break;
    }
    for (const auto& u : updates) out.sources.push_back(u.source_id);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        out.layers.emplace(keys[i], std::move(merged[i]));
        out.knots_rank.emplace(keys[i], ranks[i]);
    }
    return out;
}

MergedUpdate merge_updates(const std::vector<TaskUpdate>& updates, const MergeConfig& config) {
    config.validate();
    MergedUpdate out;
    switch (config.method) {
        case Method::TA: out = merge_ta(updates, config.alpha); break;
        case Method::TIES: out = ties_merge(updates, config.alpha, config.topk_percent); break;
        case Method::DARE_TIES: out = dare_ties_merge(updates, config.alpha, config.dare_p, config.seed()); break;
        case Method::KNOTS_TIES: out = knots_merge(updates, InnerRule::TIES, config); break;
        case Method::KNOTS_DARE_TIES: out = knots_merge(updates, InnerRule::DARE_TIES, config); break;
    }
    out.config = config;
    return out;
}

AxisComparison row_vs_column_compare(const std::vector<TaskUpdate>& updates, const MergeConfig& config) {
    const InnerRule inner = inner_rule_for(config.method);
    MergeConfig columns = config;
    columns.concat_axis = ConcatAxis::Columns;
    MergeConfig rows = config;
    rows.concat_axis = ConcatAxis::Rows;

    AxisComparison out;
    out.column_result = knots_merge(updates, inner, columns);
    out.row_result = knots_merge(updates, inner, rows);
    for (const auto& [key, m] : out.column_result.layers)
        out.frobenius_gap[key] = (m - out.row_result.layers.at(key)).norm();
    return out;
}

}  // namespace knots
