// SPDX-License-Identifier: Apache-2.0
//
// Synthetic scenarios shared by the unit tests and the acceptance binary.

#pragma once

#include <cmath>
#include <cctype>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knots/analysis.hpp"
#include "knots/eval.hpp"
#include "knots/lora.hpp"
#include "oracles.hpp"

namespace knots::fixture {

/// Independent random adapters over the same layers: their updates live in
/// unrelated subspaces, which is what the aligned CKA view is meant to expose.
struct MisalignedAdapters {
    std::vector<LoraAdapter> adapters;
    std::vector<TaskUpdate> updates;
};

inline MisalignedAdapters misaligned_adapters(std::uint64_t seed, int n = 4, int dim = 32, int rank = 4,
                                              int layer_count = 3) {
    std::mt19937_64 rng(seed);
    MisalignedAdapters out;
    for (int t = 0; t < n; ++t) {
        LoraAdapter a;
        a.rank = rank;
        a.source_id = "task" + std::to_string(t);
        for (int l = 0; l < layer_count; ++l) {
            const std::string key = "blocks." + std::to_string(l) + ".attn.q_proj";
            a.layers[key] = {oracle::random_float_matrix(rng, dim, rank), oracle::random_float_matrix(rng, rank, dim)};
            a.target_keys.push_back(key);
        }
        out.updates.push_back(materialize_update(a));
        out.adapters.push_back(std::move(a));
    }
    return out;
}

/// Two-layer scalar network f(x) = w2·relu(w1·x) with zero base weights and
/// task vectors (w1, w2) = (1, 1) and (−1, 1).
struct ToyModel {
    TensorMap base;
    TaskUpdate tau1;
    TaskUpdate tau2;
    ForwardSpec forward;
};

inline ToyModel toy_model() {
    ToyModel t;
    t.base.entries["w1"] = Tensor::from_matrix(Matrix::Zero(1, 1));
    t.base.entries["w2"] = Tensor::from_matrix(Matrix::Zero(1, 1));
    t.tau1.source_id = "f1";
    t.tau1.layers["w1"] = Matrix::Constant(1, 1, 1.0);
    t.tau1.layers["w2"] = Matrix::Constant(1, 1, 1.0);
    t.tau2.source_id = "f2";
    t.tau2.layers["w1"] = Matrix::Constant(1, 1, -1.0);
    t.tau2.layers["w2"] = Matrix::Constant(1, 1, 1.0);
    t.forward.layers = {"w1", "w2"};
    t.forward.activation = Activation::Relu;
    return t;
}

/// Scalar outputs of the toy network on `xs`, routed through the library's
/// forward pass with a 1×1 identity head.
inline std::vector<double> toy_outputs(const TensorMap& weights, const ForwardSpec& forward,
                                       const std::vector<double>& xs) {
    EvalTask probe;
    probe.name = "toy";
    probe.features = Matrix(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) probe.features(static_cast<Eigen::Index>(i), 0) = xs[i];
    probe.labels.assign(xs.size(), 0);
    probe.label_names = {"y"};
    probe.head = Matrix::Identity(1, 1);
    const Matrix logits = compute_logits(weights, probe, forward);
    return std::vector<double>(logits.data(), logits.data() + logits.size());
}

/// Two tasks sharing one 2×2 layer. Both adapters carry ΔW = [[0,0],[1,1]]
/// on base [[0.9,1.1],[0,0]], so a TA merge puts 2α in the second row. Task
/// "left" (x = e1, label 1) needs 2α > 0.9 and task "right" (x = e2,
/// label 0) needs 2α < 1.1: only α = 0.5 solves both.
struct SymmetricScenario {
    TensorMap base;
    std::vector<TaskUpdate> updates;
    std::vector<LoraAdapter> adapters;
    std::vector<EvalTask> tasks;
    ForwardSpec forward;
};

inline SymmetricScenario symmetric_scenario() {
    SymmetricScenario s;
    Matrix w(2, 2);
    w << 0.9, 1.1, 0.0, 0.0;
    s.base.entries["w"] = Tensor::from_matrix(w);
    for (const char* id : {"left", "right"}) {
        LoraAdapter a;
        a.rank = 1;
        a.source_id = id;
        Matrix b(2, 1), fa(1, 2);
        b << 0.0, 1.0;
        fa << 1.0, 1.0;
        a.layers["w"] = {b, fa};
        a.target_keys = {"w"};
        s.updates.push_back(materialize_update(a));
        s.adapters.push_back(std::move(a));
    }
    for (int t = 0; t < 2; ++t) {
        EvalTask task;
        task.name = t == 0 ? "left" : "right";
        task.features = Matrix::Zero(3, 2);
        for (int i = 0; i < 3; ++i) task.features(i, t) = 1.0 + i;
        task.labels.assign(3, t == 0 ? 1 : 0);
        task.label_names = {"low", "high"};
        task.head = Matrix::Identity(2, 2);
        task.split = Split::Validation;
        s.tasks.push_back(std::move(task));
    }
    s.forward.layers = {"w"};
    return s;
}

/// Three classification tasks over 6-d features whose label sets share two
/// names ("dog" in tasks 0 and 1, "car" in tasks 1 and 2). Class prototypes
/// are random unit vectors; examples are noisy prototypes, so per-task
/// accuracy is high but not perfect. The backbone is one identity layer.
struct JointFixture {
    TensorMap base;
    std::vector<EvalTask> tasks;
    ForwardSpec forward;
    int union_size = 0;
};

inline JointFixture joint_fixture(std::uint64_t seed, int per_class = 12, double noise = 0.45) {
    std::mt19937_64 rng(seed);
    const int d = 6;
    const std::vector<std::vector<std::string>> names = {
        {"cat", "dog", "bird"}, {"Dog ", "fish", "car", "tree"}, {"car", "ship", "plane"}};
    std::map<std::string, Vector> prototypes;
    auto canon = [](std::string s) {
        while (!s.empty() && s.back() == ' ') s.pop_back();
        for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return s;
    };
    std::normal_distribution<double> normal(0.0, 1.0);
    JointFixture f;
    for (std::size_t t = 0; t < names.size(); ++t) {
        EvalTask task;
        task.name = "task" + std::to_string(t);
        const int c = static_cast<int>(names[t].size());
        task.head = Matrix(c, d);
        for (int k = 0; k < c; ++k) {
            const std::string key = canon(names[t][static_cast<std::size_t>(k)]);
            if (!prototypes.count(key)) {
                Vector v(d);
                for (int j = 0; j < d; ++j) v(j) = normal(rng);
                prototypes[key] = v.normalized();
            }
            task.head.row(k) = prototypes[key].transpose();
        }
        task.label_names = names[t];
        task.features = Matrix(c * per_class, d);
        for (int k = 0; k < c; ++k)
            for (int e = 0; e < per_class; ++e) {
                const int row = k * per_class + e;
                for (int j = 0; j < d; ++j) task.features(row, j) = task.head(k, j) + noise * normal(rng);
                task.labels.push_back(k);
            }
        f.tasks.push_back(std::move(task));
    }
    f.union_size = static_cast<int>(prototypes.size());
    f.base.entries["w"] = Tensor::from_matrix(Matrix::Identity(d, d));
    f.forward.layers = {"w"};
    return f;
}

/// Writes every input file and run config the command-line tests use:
///   merge_ta.json / merge_knots.json  merges of the misaligned adapters
///   cka.json                          raw and aligned CKA, file probes
///   sweep.json                        TA sweep on the symmetric scenario
///   eval_task.json / eval_joint.json  per-task and joint evaluation
/// Outputs land in `out/`, which is created empty.
inline void write_cli_workspace(const std::filesystem::path& dir) {
    using nlohmann::json;
    std::filesystem::create_directories(dir / "out");
    auto put = [&](const std::string& name, const json& j) { write_file_atomic(dir / name, j.dump(2)); };

    const auto mis = misaligned_adapters(101, 3, 16, 2, 2);
    std::mt19937_64 rng(102);
    TensorMap base;
    for (const auto& key : mis.adapters.front().target_keys)
        base.entries[key] = Tensor::from_matrix(0.1 * oracle::random_float_matrix(rng, 16, 16));
    base.entries["head.bias"] = Tensor::from_vector(std::vector<float>{0.5f, -0.5f});
    base.metadata["model"] = "synthetic";
    save_tensor_map(base, dir / "base.safetensors");
    json adapters = json::array();
    for (const auto& a : mis.adapters) {
        save_tensor_map(adapter_to_tensor_map(a, KeyConvention::lora()), dir / (a.source_id + ".safetensors"));
        adapters.push_back(a.source_id + ".safetensors");
    }
    TensorMap probe;
    for (const auto& key : mis.adapters.front().target_keys)
        probe.entries[key] = Tensor::from_matrix(oracle::random_float_matrix(rng, 64, 16));
    save_tensor_map(probe, dir / "probe.safetensors");

    put("merge_ta.json", {{"adapters", adapters},
                          {"base", "base.safetensors"},
                          {"output", "out/merged_ta.safetensors"},
                          {"merge", {{"method", "TA"}, {"alpha", 0.4}}}});
    put("merge_knots.json", {{"adapters", adapters},
                             {"base", "base.safetensors"},
                             {"output", "out/merged_knots.safetensors"},
                             {"report", "out/merged_knots.json"},
                             {"merge", {{"method", "KNOTS_TIES"}, {"alpha", 0.6}, {"topk_percent", 40}}}});
    put("cka.json", {{"adapters", adapters},
                     {"report", "out/cka.json"},
                     {"probe", {{"kind", "file"}, {"path", "probe.safetensors"}}},
                     {"cka", {{"modes", {"raw_update", "knots_aligned"}}}}});

    const auto sym = symmetric_scenario();
    save_tensor_map(sym.base, dir / "sym_base.safetensors");
    json sym_adapters = json::array(), sym_tasks = json::array();
    for (std::size_t i = 0; i < sym.adapters.size(); ++i) {
        const std::string id = sym.adapters[i].source_id;
        save_tensor_map(adapter_to_tensor_map(sym.adapters[i], KeyConvention::lora()), dir / ("sym_" + id + ".safetensors"));
        save_tensor_map(eval_task_to_tensor_map(sym.tasks[i]), dir / ("task_" + id + ".safetensors"));
        sym_adapters.push_back("sym_" + id + ".safetensors");
        sym_tasks.push_back("task_" + id + ".safetensors");
    }
    const json forward = sym.forward;
    put("sweep.json", {{"adapters", sym_adapters},
                       {"base", "sym_base.safetensors"},
                       {"report", "out/sweep.json"},
                       {"output", "out/sweep_best.safetensors"},
                       {"merge", {{"method", "TA"}}},
                       {"eval", {{"tasks", sym_tasks}, {"forward", forward}}}});
    put("eval_task.json", {{"adapters", sym_adapters},
                           {"base", "sym_base.safetensors"},
                           {"report", "out/eval_task.json"},
                           {"merge", {{"method", "TA"}, {"alpha", 0.5}}},
                           {"eval", {{"tasks", sym_tasks}, {"forward", forward}, {"mode", "per_task"}}}});

    const auto jf = joint_fixture(103);
    save_tensor_map(jf.base, dir / "joint_base.safetensors");
    json joint_adapters = json::array(), joint_tasks = json::array();
    for (std::size_t t = 0; t < jf.tasks.size(); ++t) {
        LoraAdapter a;
        a.rank = 1;
        a.source_id = "joint" + std::to_string(t);
        a.layers["w"] = {0.05 * oracle::random_float_matrix(rng, 6, 1), oracle::random_float_matrix(rng, 1, 6)};
        a.target_keys = {"w"};
        save_tensor_map(adapter_to_tensor_map(a, KeyConvention::lora()), dir / (a.source_id + ".safetensors"));
        save_tensor_map(eval_task_to_tensor_map(jf.tasks[t]), dir / ("eval_" + jf.tasks[t].name + ".safetensors"));
        joint_adapters.push_back(a.source_id + ".safetensors");
        joint_tasks.push_back("eval_" + jf.tasks[t].name + ".safetensors");
    }
    put("eval_joint.json", {{"adapters", joint_adapters},
                            {"base", "joint_base.safetensors"},
                            {"report", "out/eval_joint.json"},
                            {"merge", {{"method", "TIES"}, {"alpha", 0.5}}},
                            {"eval", {{"tasks", joint_tasks}, {"forward", json(jf.forward)}, {"mode", "joint"},
                                      {"k_list", {1, 3, 5}}}}});
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("knots-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace knots::fixture
