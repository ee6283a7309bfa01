// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "knots/merge.hpp"

namespace knots {

enum class Split { Validation, Test };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

/// A classification task over pre-extracted features. `head` (c×d) maps the
/// backbone output to class logits.
struct EvalTask {
    std::string name;
    Matrix features;  // m×d_in
    std::vector<int> labels;
    std::vector<std::string> label_names;
    Matrix head;  // c×d_out
    Split split = Split::Test;

    int class_count() const { return static_cast<int>(head.rows()); }
    /// Throws LabelSpecError / ShapeError on inconsistent fields.
    void validate() const;
};

/// Container keys "features", "labels" (floats cast to int) and "head";
/// metadata "name", "label_names" (JSON array) and "split".
EvalTask eval_task_from_tensor_map(const TensorMap& map);
TensorMap eval_task_to_tensor_map(const EvalTask& task);
EvalTask load_eval_task(const std::filesystem::path& path);

/// Seeded 20% validation sample of a task; the remaining 80% is the test part.
struct SplitTask {
    EvalTask validation;
    EvalTask test;
};
SplitTask split_validation(const EvalTask& task, std::uint64_t seed, double fraction = 0.2);

enum class Activation { Identity, Relu };

/// Backbone description: logits = head · L_k(σ(… σ(L_1 · x))) where L_i are
/// the weights named by `layers` and σ is applied between layers only.
struct ForwardSpec {
    std::vector<std::string> layers;
    Activation activation = Activation::Identity;
};

void to_json(nlohmann::json& j, const ForwardSpec& spec);
void from_json(const nlohmann::json& j, ForwardSpec& spec);

/// m×c logits of every example.
Matrix compute_logits(const TensorMap& weights, const EvalTask& task, const ForwardSpec& spec);

/// Index of the largest entry; the lowest index wins ties.
int argmax_lowest(const Eigen::Ref<const Vector>& row);

double accuracy_from_logits(const Matrix& logits, const std::vector<int>& labels);

/// Fraction of examples whose argmax (lowest index on ties) equals the label.
double evaluate(const TensorMap& weights, const EvalTask& task, const ForwardSpec& spec);

/// Throws DegenerateBaseline when finetuned_acc <= 0.
double normalized_accuracy(double merged_acc, double finetuned_acc);

/// True when fewer than k logits rank ahead of true_idx, where a logit ranks
/// ahead if it is larger or equal with a lower index. Throws InvalidK.
bool hits_at_k(const Eigen::Ref<const Vector>& logits, int true_idx, int k);
double hits_at_k_rate(const Matrix& logits, const std::vector<int>& labels, int k);

struct JointLabelSpace {
    std::vector<std::string> union_labels;
    /// remap[t][c]: union index of class c of task t.
    std::vector<std::vector<int>> remap;
};

struct JointTask {
    JointLabelSpace space;
    EvalTask task;
    /// Examples of source task t occupy rows [offsets[t], offsets[t+1]).
    std::vector<Eigen::Index> offsets;
};

/// Label names are matched after trimming whitespace and lowercasing. The
/// first task that names a label supplies its head row. The joint task holds
/// every example relabelled into the union space.
JointTask build_joint_space(const std::vector<EvalTask>& tasks);

// --- hyperparameter sweeps -------------------------------------------------

struct SweepGrids {
    std::vector<double> alpha;
    std::vector<double> topk_percent;
    std::vector<double> dare_p;
    std::vector<std::uint64_t> seeds;
    /// Pruning values used while the scaling coefficient is swept.
    double default_topk = 30.0;
    double default_p = 0.9;

    static SweepGrids defaults();
};

void to_json(nlohmann::json& j, const SweepGrids& g);
/// Fields absent from `j` keep their default-grid values.
void from_json(const nlohmann::json& j, SweepGrids& g);

enum class SweepObjective { PerTaskNormalized, JointHits1 };

struct SweepSetup {
    std::vector<TaskUpdate> updates;
    TensorMap base;
    /// Validation tasks; per-task mode pairs tasks[i] with updates[i].
    std::vector<EvalTask> tasks;
    ForwardSpec forward;
    /// Method, axis and rank_tol come from here; swept fields are overwritten.
    MergeConfig config;
    SweepGrids grids = SweepGrids::defaults();
    SweepObjective objective = SweepObjective::PerTaskNormalized;
    bool exhaustive = false;
};

struct SweepPoint {
    MergeConfig config;
    double score = 0.0;
    std::string phase;  // "alpha", "pruning" or "exhaustive"
};

struct SweepResult {
    /// Every evaluated point of the linear search, in visiting order.
    std::vector<SweepPoint> search_trace;
    MergeConfig best;
    double best_score = 0.0;
    std::vector<SweepPoint> exhaustive_trace;
    std::optional<MergeConfig> exhaustive_best;
    double exhaustive_score = 0.0;
    SweepGrids grids;
    /// Number of merge+evaluate calls performed.
    int evaluations = 0;
};

void to_json(nlohmann::json& j, const SweepResult& r);

/// Pruning value a config is ranked by (top-k for TIES, p for DARE, else 0).
double pruning_value(const MergeConfig& c);

/// Linear search: sweep α at the default pruning value, then fix the best α
/// and sweep the pruning value; DARE methods try every seed at each point.
/// Ties prefer smaller α, then smaller pruning value, then smaller seed.
SweepResult sweep(const SweepSetup& setup);

/// Objective of a single merged model under a setup.
double sweep_objective(const SweepSetup& setup, const MergedUpdate& merged);

}  // namespace knots
