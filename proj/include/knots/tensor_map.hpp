// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace knots {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense row-major F32 tensor of rank 1 or 2.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    std::size_t numel() const;
    std::int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    /// Column count; a rank-1 tensor is treated as a column vector.
    std::int64_t cols() const { return shape.size() == 2 ? shape[1] : 1; }

    /// Widening copy into a column-major double matrix. Rank-1 tensors become n×1.
    Matrix to_matrix() const;

    static Tensor from_matrix(const Matrix& m);
    static Tensor from_vector(std::span<const float> values);
};

/// A checkpoint: named tensors plus free-form string metadata. Keys are kept
/// sorted so every serialization is deterministic.
struct TensorMap {
    std::map<std::string, Tensor> entries;
    std::map<std::string, std::string> metadata;

    bool contains(const std::string& key) const { return entries.count(key) != 0; }
    /// Throws KeyError when absent.
    const Tensor& at(const std::string& key) const;
};

struct LoadOptions {
    /// Accept NaN/Inf entries instead of rejecting the file.
    bool allow_nonfinite = false;
};

/// Container layout: u64 little-endian header length N, N bytes of JSON
/// header, then the concatenated little-endian float payload. Header entries
/// map key -> {dtype, shape, data_offsets} with offsets relative to the end
/// of the header; "__metadata__" holds a string map.
TensorMap parse_tensor_map(std::span<const std::byte> bytes, const LoadOptions& opts = {});
std::vector<std::byte> serialize_tensor_map(const TensorMap& map);

TensorMap load_tensor_map(const std::filesystem::path& path, const LoadOptions& opts = {});

/// Writes to a sibling temporary file and renames it into place, so a failed
/// save never leaves a partial file at `path`.
void save_tensor_map(const TensorMap& map, const std::filesystem::path& path);

/// Atomic whole-file write shared by every output the toolkit produces.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<std::byte> read_file(const std::filesystem::path& path);

}  // namespace knots
