// SPDX-License-Identifier: Apache-2.0

#include "knots/analysis.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "knots/error.hpp"
#include "knots/knots.hpp"
#include "knots/parallel.hpp"
#include "knots/rng.hpp"

namespace knots {

double cka_linear(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows())
        throw Error(ErrorKind::ShapeError, fmt::format("CKA inputs have {} and {} rows", x.rows(), y.rows()));
    if (x.rows() < 2) throw Error(ErrorKind::ShapeError, "CKA needs at least two inputs");
    const Matrix xc = x.rowwise() - x.colwise().mean();
    const Matrix yc = y.rowwise() - y.colwise().mean();
    const double xx = (xc.transpose() * xc).norm();
    const double yy = (yc.transpose() * yc).norm();
    if (xx == 0.0 || yy == 0.0) throw Error(ErrorKind::DegenerateBatch, "activations are constant across inputs");
    return (yc.transpose() * xc).squaredNorm() / (xx * yy);
}

double task_vector_cosine(const TaskUpdate& a, const TaskUpdate& b) {
    require_compatible({a, b});
    // Row-major flattening and key-sorted concatenation give the same dot
    // product as any consistent order, so per-layer sums suffice.
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [key, ma] : a.layers) {
        const Matrix& mb = b.layers.at(key);
        dot += ma.cwiseProduct(mb).sum();
        na += ma.squaredNorm();
        nb += mb.squaredNorm();
    }
    if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::DegenerateVector, "task vector is zero");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

ProbeSet gaussian_probes(const TaskUpdate& update, int m, std::uint64_t seed) {
    if (m < 2) throw Error(ErrorKind::InvalidConfig, "probe batch needs m >= 2");
    ProbeSet probes;
    probes.kind = "gaussian";
    probes.seed = seed;
    probes.m = m;
    for (const auto& [key, delta] : update.layers) {
        const KeyedUniform uniform(seed, key);
        Matrix x(m, delta.cols());
        std::uint64_t draw = 0;
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                // Box-Muller, cosine branch only.
                const double u1 = 1.0 - uniform(draw++);
                const double u2 = uniform(draw++);
                x(i, j) = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
            }
        probes.inputs.emplace(key, std::move(x));
    }
    return probes;
}

ProbeSet probes_from_tensor_map(const TensorMap& map, std::string path) {
    ProbeSet probes;
    probes.kind = "file";
    probes.path = std::move(path);
    for (const auto& [key, t] : map.entries) {
        if (t.shape.size() != 2) throw Error(ErrorKind::ShapeError, fmt::format("probe '{}' must be a matrix", key));
        if (probes.m == 0) probes.m = static_cast<int>(t.rows());
        if (t.rows() != probes.m)
            throw Error(ErrorKind::ShapeError, fmt::format("probe '{}' has {} rows, expected {}", key, t.rows(), probes.m));
        probes.inputs.emplace(key, t.to_matrix());
    }
    return probes;
}

std::string_view cka_mode_name(CkaMode mode) {
    switch (mode) {
        case CkaMode::RawUpdate: return "raw_update";
        case CkaMode::KnotsAligned: return "knots_aligned";
        case CkaMode::FftDelta: return "fft_delta";
    }
    return "?";
}

CkaMode cka_mode_from_name(std::string_view name) {
    for (CkaMode m : {CkaMode::RawUpdate, CkaMode::KnotsAligned, CkaMode::FftDelta})
        if (cka_mode_name(m) == name) return m;
    throw Error(ErrorKind::InvalidConfig, fmt::format("unknown CKA mode '{}'", name));
}

double CkaReport::mean_off_diagonal() const {
    const auto n = summary.rows();
    if (n < 2) return 1.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j) sum += summary(i, j);
    return sum / static_cast<double>(n * (n - 1));
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

const Matrix& probe_for(const ProbeSet& probes, const std::string& key, Eigen::Index in_dim) {
    auto it = probes.inputs.find(key);
    if (it == probes.inputs.end())
        throw Error(ErrorKind::MissingProbe, fmt::format("no probe inputs for layer '{}'", key));
    if (it->second.cols() != in_dim)
        throw Error(ErrorKind::ShapeError, fmt::format("probe for '{}' has {} columns but the layer takes {}", key,
                                                       it->second.cols(), in_dim));
    return it->second;
}

Matrix pairwise_matrix(const std::vector<Matrix>& activations) {
    const auto n = static_cast<Eigen::Index>(activations.size());
    Matrix out(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j) {
            const double v = cka_linear(activations[static_cast<std::size_t>(i)], activations[static_cast<std::size_t>(j)]);
            out(i, j) = v;
            out(j, i) = v;
        }
    return out;
}

/// Fills report.layers from per-layer activation builders and averages them.
template <typename Build>
void fill_report(CkaReport& report, const std::vector<std::string>& keys, std::size_t n, Build&& build) {
    std::vector<Matrix> per_layer(keys.size());
    parallel_for(keys.size(), [&](std::size_t li) { per_layer[li] = pairwise_matrix(build(keys[li])); });
    report.summary = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t li = 0; li < keys.size(); ++li) {
        report.summary += per_layer[li];
        report.layers.emplace(keys[li], std::move(per_layer[li]));
    }
    if (!keys.empty()) report.summary /= static_cast<double>(keys.size());
}

}  // namespace

void to_json(nlohmann::json& j, const CkaReport& report) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [key, m] : report.layers) layers[key] = matrix_json(m);
    nlohmann::json probe = {{"kind", report.probe.kind}, {"m", report.probe.m}};
    if (report.probe.kind == "file")
        probe["path"] = report.probe.path;
    else
        probe["seed"] = report.probe.seed;
    j = nlohmann::json{{"mode", cka_mode_name(report.mode)},
                       {"sources", report.sources},
                       {"layers", std::move(layers)},
                       {"summary", matrix_json(report.summary)},
                       {"probe", std::move(probe)}};
}

std::string summary_csv(const CkaReport& report) {
    std::ostringstream out;
    out << "source";
    for (const auto& s : report.sources) out << ',' << s;
    out << '\n';
    for (Eigen::Index i = 0; i < report.summary.rows(); ++i) {
        out << report.sources.at(static_cast<std::size_t>(i));
        for (Eigen::Index j = 0; j < report.summary.cols(); ++j) out << ',' << fmt::format("{:.6f}", report.summary(i, j));
        out << '\n';
    }
    return out.str();
}

CkaReport pairwise_update_cka(const std::vector<TaskUpdate>& updates, const ProbeSet& probes, CkaMode mode,
                              double rank_tol) {
    require_compatible(updates);
    if (mode == CkaMode::FftDelta)
        throw Error(ErrorKind::InvalidConfig, "fft_delta mode needs full checkpoints (pairwise_checkpoint_cka)");

    CkaReport report;
    report.mode = mode;
    report.probe = probes;
    report.probe.inputs.clear();
    for (const auto& u : updates) report.sources.push_back(u.source_id);

    std::vector<std::string> keys;
    for (const auto& [key, delta] : updates.front().layers) {
        probe_for(probes, key, delta.cols());
        keys.push_back(key);
    }

    fill_report(report, keys, updates.size(), [&](const std::string& key) {
        const Matrix& x = probes.inputs.at(key);
        std::vector<Matrix> acts;
        if (mode == CkaMode::RawUpdate) {
            for (const auto& u : updates) acts.push_back(x * u.layers.at(key).transpose());
        } else {
            std::vector<Matrix> layer;
            for (const auto& u : updates) layer.push_back(u.layers.at(key));
            const auto dec = knots_decompose(layer, ConcatAxis::Columns, rank_tol, key);
            for (const auto& v : dec.blocks) acts.push_back(x * v);
        }
        return acts;
    });
    return report;
}

CkaReport pairwise_checkpoint_cka(const TensorMap& base, const std::vector<TensorMap>& finetuned,
                                  const std::vector<std::string>& sources, const std::vector<std::string>& keys,
                                  const ProbeSet& probes) {
    if (finetuned.empty()) throw Error(ErrorKind::EmptyInput, "no finetuned checkpoints supplied");
    if (sources.size() != finetuned.size())
        throw Error(ErrorKind::InvalidConfig, "one source id per finetuned checkpoint is required");

    CkaReport report;
    report.mode = CkaMode::FftDelta;
    report.probe = probes;
    report.probe.inputs.clear();
    report.sources = sources;

    std::map<std::string, Matrix> base_weights;
    for (const auto& key : keys) {
        Matrix w = base.at(key).to_matrix();
        probe_for(probes, key, w.cols());
        for (const auto& ft : finetuned)
            if (ft.at(key).shape != base.at(key).shape)
                throw Error(ErrorKind::ShapeError, fmt::format("layer '{}' differs in shape from the base", key));
        base_weights.emplace(key, std::move(w));
    }

    fill_report(report, keys, finetuned.size(), [&](const std::string& key) {
        const Matrix& x = probes.inputs.at(key);
        const Matrix pretrained = x * base_weights.at(key).transpose();
        std::vector<Matrix> acts;
        for (const auto& ft : finetuned) acts.push_back(x * ft.at(key).to_matrix().transpose() - pretrained);
        return acts;
    });
    return report;
}

}  // namespace knots
