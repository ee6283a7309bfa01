// SPDX-License-Identifier: Apache-2.0

#include "knots/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "knots/error.hpp"
#include "knots/rng.hpp"

namespace knots {

std::string_view split_name(Split s) { return s == Split::Validation ? "validation" : "test"; }

Split split_from_name(std::string_view name) {
    if (name == "validation") return Split::Validation;
    if (name == "test") return Split::Test;
    throw Error(ErrorKind::LabelSpecError, fmt::format("unknown split '{}'", name));
}

void EvalTask::validate() const {
    const auto c = head.rows();
    if (static_cast<std::size_t>(c) != label_names.size())
        throw Error(ErrorKind::LabelSpecError, fmt::format("task '{}': head has {} rows but {} label names", name, c,
                                                           label_names.size()));
    if (features.rows() < 1) throw Error(ErrorKind::ShapeError, fmt::format("task '{}' has no examples", name));
    if (static_cast<std::size_t>(features.rows()) != labels.size())
        throw Error(ErrorKind::ShapeError, fmt::format("task '{}': {} feature rows but {} labels", name,
                                                       features.rows(), labels.size()));
    for (int l : labels)
        if (l < 0 || l >= c)
            throw Error(ErrorKind::LabelSpecError, fmt::format("task '{}': label {} outside [0, {})", name, l, c));
}

EvalTask eval_task_from_tensor_map(const TensorMap& map) {
    EvalTask task;
    auto meta = [&](const std::string& key) -> const std::string& {
        auto it = map.metadata.find(key);
        if (it == map.metadata.end())
            throw Error(ErrorKind::LabelSpecError, fmt::format("task container lacks metadata '{}'", key));
        return it->second;
    };
    task.name = meta("name");
    try {
        task.label_names = nlohmann::json::parse(meta("label_names")).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::LabelSpecError, fmt::format("label_names is not a JSON string array: {}", e.what()));
    }
    task.split = split_from_name(meta("split"));

    const Tensor& features = map.at("features");
    const Tensor& head = map.at("head");
    if (features.shape.size() != 2 || head.shape.size() != 2)
        throw Error(ErrorKind::ShapeError, "features and head must be matrices");
    task.features = features.to_matrix();
    task.head = head.to_matrix();
    for (float v : map.at("labels").data) {
        if (v != std::floor(v)) throw Error(ErrorKind::LabelSpecError, fmt::format("label {} is not an integer", v));
        task.labels.push_back(static_cast<int>(v));
    }
    task.validate();
    return task;
}

TensorMap eval_task_to_tensor_map(const EvalTask& task) {
    task.validate();
    TensorMap map;
    map.entries["features"] = Tensor::from_matrix(task.features);
    map.entries["head"] = Tensor::from_matrix(task.head);
    std::vector<float> labels(task.labels.begin(), task.labels.end());
    map.entries["labels"] = Tensor::from_vector(labels);
    map.metadata["name"] = task.name;
    map.metadata["label_names"] = nlohmann::json(task.label_names).dump();
    map.metadata["split"] = std::string(split_name(task.split));
    return map;
}

EvalTask load_eval_task(const std::filesystem::path& path) { return eval_task_from_tensor_map(load_tensor_map(path)); }

namespace {

EvalTask subset(const EvalTask& task, const std::vector<std::size_t>& rows, Split split) {
    EvalTask out;
    out.name = task.name;
    out.label_names = task.label_names;
    out.head = task.head;
    out.split = split;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), task.features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<Eigen::Index>(i)) = task.features.row(static_cast<Eigen::Index>(rows[i]));
        out.labels.push_back(task.labels[rows[i]]);
    }
    return out;
}

std::string normalize_label(const std::string& s) {
    auto begin = std::find_if_not(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
    auto end = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) { return std::isspace(c); }).base();
    std::string out = begin < end ? std::string(begin, end) : std::string();
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

SplitTask split_validation(const EvalTask& task, std::uint64_t seed, double fraction) {
    task.validate();
    const std::size_t m = task.labels.size();
    if (m < 2) throw Error(ErrorKind::ShapeError, fmt::format("task '{}' is too small to split", task.name));
    if (!(fraction > 0.0 && fraction < 1.0))
        throw Error(ErrorKind::InvalidConfig, fmt::format("validation fraction {} outside (0, 1)", fraction));

    const KeyedUniform uniform(seed, task.name);
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return uniform(a) < uniform(b); });
    auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m) - 1e-9));
    count = std::clamp<std::size_t>(count, 1, m - 1);

    std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(count), order.end());
    std::sort(val.begin(), val.end());
    std::sort(test.begin(), test.end());
    return {subset(task, val, Split::Validation), subset(task, test, Split::Test)};
}

void to_json(nlohmann::json& j, const ForwardSpec& spec) {
    j = nlohmann::json{{"layers", spec.layers}, {"activation", spec.activation == Activation::Relu ? "relu" : "identity"}};
}

void from_json(const nlohmann::json& j, ForwardSpec& spec) {
    try {
        spec.layers = j.at("layers").get<std::vector<std::string>>();
        const std::string act = j.value("activation", std::string("identity"));
        if (act == "relu")
            spec.activation = Activation::Relu;
        else if (act == "identity")
            spec.activation = Activation::Identity;
        else
            throw Error(ErrorKind::InvalidConfig, fmt::format("unknown activation '{}'", act));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, fmt::format("forward spec: {}", e.what()));
    }
}

Matrix compute_logits(const TensorMap& weights, const EvalTask& task, const ForwardSpec& spec) {
    Matrix hidden = task.features;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Tensor& t = weights.at(spec.layers[i]);
        if (t.shape.size() != 2 || t.cols() != hidden.cols())
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}' takes {} inputs but receives {}", spec.layers[i],
                                                           t.cols(), hidden.cols()));
        hidden = hidden * t.to_matrix().transpose();
        if (spec.activation == Activation::Relu && i + 1 < spec.layers.size()) hidden = hidden.cwiseMax(0.0);
    }
    if (task.head.cols() != hidden.cols())
        throw Error(ErrorKind::ShapeError, fmt::format("task '{}': head takes {} features but the backbone emits {}",
                                                       task.name, task.head.cols(), hidden.cols()));
    return hidden * task.head.transpose();
}

int argmax_lowest(const Eigen::Ref<const Vector>& row) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < row.size(); ++i)
        if (row(i) > row(best)) best = i;
    return static_cast<int>(best);
}

double accuracy_from_logits(const Matrix& logits, const std::vector<int>& labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty())
        throw Error(ErrorKind::ShapeError, "logit rows and labels disagree");
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        if (argmax_lowest(logits.row(i).transpose()) == labels[static_cast<std::size_t>(i)]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const TensorMap& weights, const EvalTask& task, const ForwardSpec& spec) {
    task.validate();
    return accuracy_from_logits(compute_logits(weights, task, spec), task.labels);
}

double normalized_accuracy(double merged_acc, double finetuned_acc) {
    if (!(finetuned_acc > 0.0))
        throw Error(ErrorKind::DegenerateBaseline, fmt::format("finetuned accuracy {} must be positive", finetuned_acc));
    return merged_acc / finetuned_acc;
}

bool hits_at_k(const Eigen::Ref<const Vector>& logits, int true_idx, int k) {
    const auto c = static_cast<int>(logits.size());
    if (k < 1 || k > c) throw Error(ErrorKind::InvalidK, fmt::format("k={} outside [1, {}]", k, c));
    if (true_idx < 0 || true_idx >= c)
        throw Error(ErrorKind::LabelSpecError, fmt::format("label {} outside [0, {})", true_idx, c));
    const double target = logits(true_idx);
    int ahead = 0;
    for (int i = 0; i < c; ++i)
        if (logits(i) > target || (logits(i) == target && i < true_idx)) ++ahead;
    return ahead < k;
}

double hits_at_k_rate(const Matrix& logits, const std::vector<int>& labels, int k) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty())
        throw Error(ErrorKind::ShapeError, "logit rows and labels disagree");
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        if (hits_at_k(logits.row(i).transpose(), labels[static_cast<std::size_t>(i)], k)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

JointTask build_joint_space(const std::vector<EvalTask>& tasks) {
    if (tasks.empty()) throw Error(ErrorKind::EmptyInput, "no tasks to join");
    for (const auto& t : tasks) t.validate();
    const auto head_dim = tasks.front().head.cols();
    const auto feature_dim = tasks.front().features.cols();

    JointTask out;
    std::unordered_map<std::string, int> index;
    std::vector<Vector> head_rows;
    for (const auto& t : tasks) {
        if (t.head.cols() != head_dim || t.features.cols() != feature_dim)
            throw Error(ErrorKind::ShapeError, fmt::format("task '{}' does not share the feature/head width", t.name));
        std::vector<int> remap;
        for (std::size_t c = 0; c < t.label_names.size(); ++c) {
            const std::string key = normalize_label(t.label_names[c]);
            auto [it, inserted] = index.emplace(key, static_cast<int>(out.space.union_labels.size()));
            if (inserted) {
                out.space.union_labels.push_back(key);
                head_rows.push_back(t.head.row(static_cast<Eigen::Index>(c)).transpose());
            }
            remap.push_back(it->second);
        }
        out.space.remap.push_back(std::move(remap));
    }

    Eigen::Index total = 0;
    for (const auto& t : tasks) total += t.features.rows();
    EvalTask& joint = out.task;
    joint.name = "joint";
    joint.label_names = out.space.union_labels;
    joint.split = tasks.front().split;
    joint.head.resize(static_cast<Eigen::Index>(head_rows.size()), head_dim);
    for (std::size_t r = 0; r < head_rows.size(); ++r) joint.head.row(static_cast<Eigen::Index>(r)) = head_rows[r];
    joint.features.resize(total, feature_dim);
    Eigen::Index row = 0;
    out.offsets.push_back(0);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        joint.features.middleRows(row, tasks[t].features.rows()) = tasks[t].features;
        row += tasks[t].features.rows();
        out.offsets.push_back(row);
        for (int l : tasks[t].labels) joint.labels.push_back(out.space.remap[t][static_cast<std::size_t>(l)]);
    }
    return out;
}

}  // namespace knots
