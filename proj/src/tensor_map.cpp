// SPDX-License-Identifier: Apache-2.0

#include "knots/tensor_map.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "knots/error.hpp"

namespace knots {

static_assert(std::endian::native == std::endian::little,
              "container payloads are memcpy'd as little-endian floats");

using nlohmann::json;

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

Matrix Tensor::to_matrix() const {
    const auto r = rows();
    const auto c = cols();
    Matrix m(r, c);
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            m(i, j) = static_cast<double>(data[static_cast<std::size_t>(i * c + j)]);
    return m;
}

Tensor Tensor::from_matrix(const Matrix& m) {
    Tensor t;
    t.shape = {m.rows(), m.cols()};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            t.data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
    return t;
}

Tensor Tensor::from_vector(std::span<const float> values) {
    Tensor t;
    t.shape = {static_cast<std::int64_t>(values.size())};
    t.data.assign(values.begin(), values.end());
    return t;
}

const Tensor& TensorMap::at(const std::string& key) const {
    auto it = entries.find(key);
    if (it == entries.end()) throw Error(ErrorKind::KeyError, fmt::format("no tensor named '{}'", key));
    return it->second;
}

namespace {

std::uint64_t read_u64_le(const std::byte* p) {
    std::uint64_t v = 0;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

void validate_tensor(const std::string& key, const Tensor& t) {
    if (key.empty()) throw Error(ErrorKind::ShapeError, "tensor key must be nonempty");
    if (t.shape.empty() || t.shape.size() > 2)
        throw Error(ErrorKind::ShapeError, fmt::format("tensor '{}' has rank {}; expected 1 or 2", key, t.shape.size()));
    for (auto d : t.shape)
        if (d < 0) throw Error(ErrorKind::ShapeError, fmt::format("tensor '{}' has a negative dimension", key));
    if (t.data.size() != t.numel())
        throw Error(ErrorKind::ShapeError,
                    fmt::format("tensor '{}' holds {} values but its shape needs {}", key, t.data.size(), t.numel()));
}

}  // namespace

TensorMap parse_tensor_map(std::span<const std::byte> bytes, const LoadOptions& opts) {
    if (bytes.size() < sizeof(std::uint64_t))
        throw Error(ErrorKind::ParseError, "file is shorter than the 8-byte header length");
    const std::uint64_t header_len = read_u64_le(bytes.data());
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    if (header_len > body)
        throw Error(ErrorKind::CorruptFile,
                    fmt::format("header length {} exceeds the {} bytes that follow it", header_len, body));

    const char* header_begin = reinterpret_cast<const char*>(bytes.data() + sizeof(std::uint64_t));
    json header;
    try {
        header = json::parse(header_begin, header_begin + header_len);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::ParseError, fmt::format("header is not valid JSON: {}", e.what()));
    }
    if (!header.is_object()) throw Error(ErrorKind::ParseError, "header must be a JSON object");

    const std::byte* payload = bytes.data() + sizeof(std::uint64_t) + header_len;
    const std::size_t payload_len = body - header_len;

    TensorMap out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& key = it.key();
        const json& entry = it.value();
        if (key == "__metadata__") {
            if (!entry.is_object()) throw Error(ErrorKind::ParseError, "__metadata__ must be an object");
            for (auto m = entry.begin(); m != entry.end(); ++m) {
                if (!m.value().is_string())
                    throw Error(ErrorKind::ParseError, fmt::format("metadata '{}' is not a string", m.key()));
                out.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (key.empty()) throw Error(ErrorKind::ParseError, "empty tensor key");
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw Error(ErrorKind::ParseError, fmt::format("entry '{}' lacks dtype/shape/data_offsets", key));

        const json& dtype = entry["dtype"];
        if (!dtype.is_string()) throw Error(ErrorKind::ParseError, fmt::format("entry '{}' dtype is not a string", key));
        if (dtype.get<std::string>() != "F32")
            throw Error(ErrorKind::UnsupportedDtype,
                        fmt::format("entry '{}' has dtype {}; only F32 is supported", key, dtype.get<std::string>()));

        Tensor t;
        const json& shape = entry["shape"];
        const json& offsets = entry["data_offsets"];
        if (!shape.is_array() || shape.empty() || shape.size() > 2)
            throw Error(ErrorKind::ParseError, fmt::format("entry '{}' must have rank 1 or 2", key));
        for (const auto& d : shape) {
            if (!d.is_number_unsigned()) throw Error(ErrorKind::ParseError, fmt::format("entry '{}' has a bad dimension", key));
            t.shape.push_back(d.get<std::int64_t>());
        }
        if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
            !offsets[1].is_number_unsigned())
            throw Error(ErrorKind::ParseError, fmt::format("entry '{}' has malformed data_offsets", key));
        const auto begin = offsets[0].get<std::uint64_t>();
        const auto end = offsets[1].get<std::uint64_t>();
        if (end < begin || end - begin != t.numel() * sizeof(float))
            throw Error(ErrorKind::ParseError,
                        fmt::format("entry '{}' offsets span {} bytes but shape needs {}", key,
                                    end >= begin ? end - begin : 0, t.numel() * sizeof(float)));
        if (end > payload_len)
            throw Error(ErrorKind::CorruptFile,
                        fmt::format("entry '{}' ends at byte {} but the payload holds {}", key, end, payload_len));

        t.data.resize(t.numel());
        if (!t.data.empty()) std::memcpy(t.data.data(), payload + begin, end - begin);
        if (!opts.allow_nonfinite) {
            for (float v : t.data)
                if (!std::isfinite(v))
                    throw Error(ErrorKind::CorruptFile, fmt::format("entry '{}' contains a non-finite value", key));
        }
        out.entries.emplace(key, std::move(t));
    }
    return out;
}

std::vector<std::byte> serialize_tensor_map(const TensorMap& map) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [key, t] : map.entries) {
        validate_tensor(key, t);
        const std::uint64_t len = t.data.size() * sizeof(float);
        header[key] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
        offset += len;
    }
    if (!map.metadata.empty()) header["__metadata__"] = map.metadata;

    std::string text = header.dump();
    // Pad so the payload starts 8-byte aligned.
    while ((text.size() % 8) != 0) text.push_back(' ');

    std::vector<std::byte> out(sizeof(std::uint64_t) + text.size() + offset);
    const std::uint64_t header_len = text.size();
    std::memcpy(out.data(), &header_len, sizeof(header_len));
    std::memcpy(out.data() + sizeof(header_len), text.data(), text.size());
    std::byte* payload = out.data() + sizeof(header_len) + text.size();
    for (const auto& [key, t] : map.entries) {
        const std::size_t len = t.data.size() * sizeof(float);
        if (len != 0) std::memcpy(payload, t.data.data(), len);
        payload += len;
    }
    return out;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, fmt::format("cannot open '{}'", path.string()));
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> bytes(raw.size());
    if (!raw.empty()) std::memcpy(bytes.data(), raw.data(), raw.size());
    return bytes;
}

TensorMap load_tensor_map(const std::filesystem::path& path, const LoadOptions& opts) {
    const auto bytes = read_file(path);
    return parse_tensor_map(bytes, opts);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::random_device rd;
    auto tmp = path;
    tmp += fmt::format(".tmp{:08x}", rd());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::IoError, fmt::format("cannot write '{}'", tmp.string()));
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw Error(ErrorKind::IoError, fmt::format("short write to '{}'", tmp.string()));
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error(ErrorKind::IoError, fmt::format("cannot rename into '{}': {}", path.string(), ec.message()));
    }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

void save_tensor_map(const TensorMap& map, const std::filesystem::path& path) {
    const auto bytes = serialize_tensor_map(map);
    write_file_atomic(path, bytes);
}

}  // namespace knots
