// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "knots/tensor_map.hpp"

namespace knots {

/// How the A/B factors of an adapted layer are named inside a container.
/// The factor keys are "{layer}{a_suffix}" and "{layer}{b_suffix}".
struct KeyConvention {
    std::string a_suffix;
    std::string b_suffix;

    static KeyConvention lora();   // "{layer}.lora_A" / "{layer}.lora_B"
    static KeyConvention plain();  // "{layer}.A" / "{layer}.B"
    /// Accepts "lora" or "plain"; anything else is InvalidConfig.
    static KeyConvention by_name(std::string_view name);
};

struct LoraFactors {
    Matrix b;  // O×r
    Matrix a;  // r×I
};

struct LoraAdapter {
    std::map<std::string, LoraFactors> layers;
    int rank = 0;
    std::vector<std::string> target_keys;  // sorted layer keys
    std::string source_id;
    /// Multiplier folded into B·A; read from the "lora_scale" metadata entry.
    double scale = 1.0;
};

/// Dense per-layer updates of one finetuned model.
struct TaskUpdate {
    std::map<std::string, Matrix> layers;
    std::string source_id;
};

/// Builds an adapter from container entries. Tensors not matching the
/// convention are ignored. Metadata "source_id" (or `fallback_source_id`) and
/// "lora_scale" are honoured.
LoraAdapter adapter_from_tensor_map(const TensorMap& map, const KeyConvention& convention,
                                    const std::string& fallback_source_id = {});

/// Loads an adapter; the source id defaults to the file stem.
LoraAdapter load_adapter(const std::filesystem::path& path, const KeyConvention& convention);

/// Stores an adapter in the container layout understood by load_adapter.
TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, const KeyConvention& convention);

/// ΔW = scale · B·A for every adapted layer.
TaskUpdate materialize_update(const LoraAdapter& adapter);

/// Returns base with W + ΔW at the selected keys (all update keys when
/// `keys` is empty). Other tensors are copied unchanged.
TensorMap apply_update(const TensorMap& base, const TaskUpdate& update, const std::vector<std::string>& keys = {});

/// ΔW = finetuned − base over `keys`, for full finetuned checkpoints.
TaskUpdate update_from_checkpoints(const TensorMap& base, const TensorMap& finetuned,
                                   const std::vector<std::string>& keys, const std::string& source_id);

/// Throws ShapeError unless every update has the same keys and per-key shapes,
/// EmptyInput when the list is empty.
void require_compatible(const std::vector<TaskUpdate>& updates);

}  // namespace knots
