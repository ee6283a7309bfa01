// SPDX-License-Identifier: Apache-2.0

#include <array>
#include <fstream>
#include <sstream>

#include <fmt/core.h>
#include <openssl/evp.h>

#include "knots/cli.hpp"
#include "knots/error.hpp"
#include "knots/tensor_map.hpp"

namespace knots::cli {

namespace {

std::vector<std::string> split_dotted(const std::string& dotted) {
    std::vector<std::string> parts;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw Error(ErrorKind::InvalidConfig, fmt::format("malformed config key '{}'", dotted));
        parts.push_back(part);
    }
    if (parts.empty()) throw Error(ErrorKind::InvalidConfig, "empty config key");
    return parts;
}

nlohmann::json& slot_for(RunConfig& cfg, const std::string& dotted) {
    nlohmann::json* node = &cfg.doc;
    for (const auto& part : split_dotted(dotted)) {
        if (!node->is_object()) {
            if (!node->is_null())
                throw Error(ErrorKind::InvalidConfig, fmt::format("'{}' crosses a non-object value", dotted));
            *node = nlohmann::json::object();
        }
        node = &(*node)[part];
    }
    return *node;
}

}  // namespace

std::filesystem::path RunConfig::resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
}

const nlohmann::json* RunConfig::find(const std::string& dotted) const {
    const nlohmann::json* node = &doc;
    for (const auto& part : split_dotted(dotted)) {
        if (!node->is_object() || !node->contains(part)) return nullptr;
        node = &(*node)[part];
    }
    return node;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    RunConfig cfg;
    try {
        cfg.doc = nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data()),
                                        reinterpret_cast<const char*>(bytes.data()) + bytes.size());
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::InvalidConfig, fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
    }
    if (!cfg.doc.is_object()) throw Error(ErrorKind::InvalidConfig, "config must be a JSON object");
    cfg.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw Error(ErrorKind::InvalidConfig, fmt::format("--set expects key=value, got '{}'", assignment));
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = text;
    slot_for(cfg, key) = std::move(value);
}

void apply_flag(RunConfig& cfg, const std::string& dotted, const nlohmann::json& value, const std::string& flag) {
    if (const auto* existing = cfg.find(dotted); existing && *existing != value)
        throw Error(ErrorKind::InvalidConfig, fmt::format("{} {} conflicts with config {}={}", flag, value.dump(),
                                                          dotted, existing->dump()));
    slot_for(cfg, dotted) = value;
}

std::string sha256_hex(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorKind::IoError, fmt::format("cannot hash '{}'", path.string()));
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
    return hex;
}

}  // namespace knots::cli
