// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "knots/lora.hpp"

namespace knots {

/// Linear CKA between two activation sets over the same m inputs (rows).
/// Throws DegenerateBatch when either input is constant across rows, and
/// ShapeError when row counts differ or m < 2.
double cka_linear(const Matrix& x, const Matrix& y);

/// Cosine between two task vectors, each the key-sorted concatenation of its
/// flattened layers. Throws DegenerateVector for a zero vector.
double task_vector_cosine(const TaskUpdate& a, const TaskUpdate& b);

/// Layer inputs used to probe every adapted layer: key -> m×I matrix.
struct ProbeSet {
    std::map<std::string, Matrix> inputs;
    std::string kind;  // "gaussian" or "file"
    std::uint64_t seed = 0;
    std::string path;
    int m = 0;
};

/// Seeded standard-normal probes shaped for the layers of `update`.
ProbeSet gaussian_probes(const TaskUpdate& update, int m, std::uint64_t seed);

/// Probes stored in a tensor container, one m×I matrix per layer key.
ProbeSet probes_from_tensor_map(const TensorMap& map, std::string path = {});

enum class CkaMode { RawUpdate, KnotsAligned, FftDelta };

std::string_view cka_mode_name(CkaMode mode);
CkaMode cka_mode_from_name(std::string_view name);

struct CkaReport {
    CkaMode mode = CkaMode::RawUpdate;
    std::vector<std::string> sources;
    std::map<std::string, Matrix> layers;
    /// Unweighted mean of the per-layer matrices.
    Matrix summary;
    ProbeSet probe;  // inputs are not serialized, only their origin

    /// Mean of the strictly off-diagonal summary entries.
    double mean_off_diagonal() const;
};

void to_json(nlohmann::json& j, const CkaReport& report);
std::string summary_csv(const CkaReport& report);

/// Pairwise CKA of per-layer activations across updates, averaged over layers.
///   RawUpdate:    activations X·ΔW⁽ⁱ⁾ᵀ.
///   KnotsAligned: joint column decomposition per layer, activations X·V⁽ⁱ⁾.
/// FftDelta needs full checkpoints; see pairwise_checkpoint_cka.
CkaReport pairwise_update_cka(const std::vector<TaskUpdate>& updates, const ProbeSet& probes, CkaMode mode,
                              double rank_tol = 1e-8);

/// FftDelta mode: finetuned-layer activations minus pretrained-layer
/// activations, X·W_ftᵀ − X·W_ptᵀ, over `keys`.
CkaReport pairwise_checkpoint_cka(const TensorMap& base, const std::vector<TensorMap>& finetuned,
                                  const std::vector<std::string>& sources, const std::vector<std::string>& keys,
                                  const ProbeSet& probes);

}  // namespace knots
