// SPDX-License-Identifier: Apache-2.0

#include "knots/lora.hpp"

#include <cmath>

#include <fmt/core.h>

#include "knots/error.hpp"

namespace knots {

KeyConvention KeyConvention::lora() { return {".lora_A", ".lora_B"}; }
KeyConvention KeyConvention::plain() { return {".A", ".B"}; }

KeyConvention KeyConvention::by_name(std::string_view name) {
    if (name == "lora") return lora();
    if (name == "plain") return plain();
    throw Error(ErrorKind::InvalidConfig, fmt::format("unknown key convention '{}' (expected lora or plain)", name));
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

double parse_scale(const std::string& text) {
    try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::ParseError, fmt::format("lora_scale '{}' is not a number", text));
    }
}

}  // namespace

LoraAdapter adapter_from_tensor_map(const TensorMap& map, const KeyConvention& convention,
                                    const std::string& fallback_source_id) {
    std::map<std::string, const Tensor*> a_factors;
    std::map<std::string, const Tensor*> b_factors;
    for (const auto& [key, t] : map.entries) {
        if (ends_with(key, convention.a_suffix))
            a_factors[key.substr(0, key.size() - convention.a_suffix.size())] = &t;
        else if (ends_with(key, convention.b_suffix))
            b_factors[key.substr(0, key.size() - convention.b_suffix.size())] = &t;
    }

    for (const auto& [layer, _] : a_factors)
        if (!b_factors.count(layer))
            throw Error(ErrorKind::IncompleteAdapter, fmt::format("layer '{}' has an A factor but no B factor", layer));
    for (const auto& [layer, _] : b_factors)
        if (!a_factors.count(layer))
            throw Error(ErrorKind::IncompleteAdapter, fmt::format("layer '{}' has a B factor but no A factor", layer));
    if (a_factors.empty())
        throw Error(ErrorKind::IncompleteAdapter, "container holds no factor pairs under the chosen key convention");

    LoraAdapter adapter;
    for (const auto& [layer, a_tensor] : a_factors) {
        const Tensor* b_tensor = b_factors.at(layer);
        if (a_tensor->shape.size() != 2 || b_tensor->shape.size() != 2)
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}' factors must be matrices", layer));
        const auto r_a = a_tensor->rows();
        const auto r_b = b_tensor->cols();
        if (r_a != r_b)
            throw Error(ErrorKind::RankMismatch,
                        fmt::format("layer '{}': B has {} columns but A has {} rows", layer, r_b, r_a));
        const auto out_dim = b_tensor->rows();
        const auto in_dim = a_tensor->cols();
        if (r_a < 1 || r_a > std::min(out_dim, in_dim))
            throw Error(ErrorKind::RankMismatch,
                        fmt::format("layer '{}': rank {} outside [1, min({}, {})]", layer, r_a, out_dim, in_dim));
        if (adapter.rank == 0) {
            adapter.rank = static_cast<int>(r_a);
        } else if (adapter.rank != r_a) {
            throw Error(ErrorKind::RankMismatch,
                        fmt::format("layer '{}' has rank {} but earlier layers have rank {}", layer, r_a, adapter.rank));
        }
        adapter.layers.emplace(layer, LoraFactors{b_tensor->to_matrix(), a_tensor->to_matrix()});
        adapter.target_keys.push_back(layer);
    }

    auto sid = map.metadata.find("source_id");
    adapter.source_id = sid != map.metadata.end() ? sid->second : fallback_source_id;
    auto scale = map.metadata.find("lora_scale");
    if (scale != map.metadata.end()) adapter.scale = parse_scale(scale->second);
    return adapter;
}

LoraAdapter load_adapter(const std::filesystem::path& path, const KeyConvention& convention) {
    return adapter_from_tensor_map(load_tensor_map(path), convention, path.stem().string());
}

TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, const KeyConvention& convention) {
    TensorMap out;
    for (const auto& [layer, f] : adapter.layers) {
        out.entries[layer + convention.a_suffix] = Tensor::from_matrix(f.a);
        out.entries[layer + convention.b_suffix] = Tensor::from_matrix(f.b);
    }
    if (!adapter.source_id.empty()) out.metadata["source_id"] = adapter.source_id;
    if (adapter.scale != 1.0) out.metadata["lora_scale"] = fmt::format("{}", adapter.scale);
    return out;
}

TaskUpdate materialize_update(const LoraAdapter& adapter) {
    TaskUpdate update;
    update.source_id = adapter.source_id;
    for (const auto& [layer, f] : adapter.layers) {
        if (f.b.cols() != f.a.rows())
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}': B is {}x{} but A is {}x{}", layer, f.b.rows(),
                                                           f.b.cols(), f.a.rows(), f.a.cols()));
        Matrix delta = f.b * f.a;
        if (adapter.scale != 1.0) delta *= adapter.scale;
        update.layers.emplace(layer, std::move(delta));
    }
    return update;
}

TensorMap apply_update(const TensorMap& base, const TaskUpdate& update, const std::vector<std::string>& keys) {
    std::vector<std::string> selected = keys;
    if (selected.empty())
        for (const auto& [key, _] : update.layers) selected.push_back(key);

    TensorMap out = base;
    for (const auto& key : selected) {
        auto u = update.layers.find(key);
        if (u == update.layers.end())
            throw Error(ErrorKind::KeyError, fmt::format("update has no layer '{}'", key));
        auto b = out.entries.find(key);
        if (b == out.entries.end()) throw Error(ErrorKind::KeyError, fmt::format("base has no tensor '{}'", key));
        Tensor& w = b->second;
        const Matrix& delta = u->second;
        if (w.shape.size() != 2 || w.rows() != delta.rows() || w.cols() != delta.cols())
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}': base is {}x{} but update is {}x{}", key,
                                                           w.rows(), w.cols(), delta.rows(), delta.cols()));
        const auto cols = w.cols();
        for (Eigen::Index i = 0; i < delta.rows(); ++i)
            for (Eigen::Index j = 0; j < delta.cols(); ++j) {
                float& v = w.data[static_cast<std::size_t>(i * cols + j)];
                v = static_cast<float>(static_cast<double>(v) + delta(i, j));
            }
    }
    return out;
}

TaskUpdate update_from_checkpoints(const TensorMap& base, const TensorMap& finetuned,
                                   const std::vector<std::string>& keys, const std::string& source_id) {
    TaskUpdate update;
    update.source_id = source_id;
    for (const auto& key : keys) {
        const Tensor& w0 = base.at(key);
        const Tensor& w1 = finetuned.at(key);
        if (w0.shape != w1.shape)
            throw Error(ErrorKind::ShapeError, fmt::format("layer '{}' differs in shape between checkpoints", key));
        update.layers.emplace(key, w1.to_matrix() - w0.to_matrix());
    }
    return update;
}

void require_compatible(const std::vector<TaskUpdate>& updates) {
    if (updates.empty()) throw Error(ErrorKind::EmptyInput, "no task updates supplied");
    const auto& ref = updates.front().layers;
    for (std::size_t i = 1; i < updates.size(); ++i) {
        const auto& layers = updates[i].layers;
        if (layers.size() != ref.size())
            throw Error(ErrorKind::ShapeError,
                        fmt::format("update {} has {} layers but update 0 has {}", i, layers.size(), ref.size()));
        for (const auto& [key, m] : ref) {
            auto it = layers.find(key);
            if (it == layers.end())
                throw Error(ErrorKind::ShapeError, fmt::format("update {} lacks layer '{}'", i, key));
            if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
                throw Error(ErrorKind::ShapeError,
                            fmt::format("layer '{}': update {} is {}x{} but update 0 is {}x{}", key, i,
                                        it->second.rows(), it->second.cols(), m.rows(), m.cols()));
        }
    }
}

}  // namespace knots
