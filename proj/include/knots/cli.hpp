// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace knots::cli {

/// Command-scoped JSON config plus the directory relative paths resolve against.
struct RunConfig {
    nlohmann::json doc = nlohmann::json::object();
    std::filesystem::path base_dir = ".";

    std::filesystem::path resolve(const std::string& p) const;
    /// Value at a dotted path such as "merge.alpha", if present.
    const nlohmann::json* find(const std::string& dotted) const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one `key=value` override; the value is parsed as JSON when it can
/// be, otherwise taken as a string. Intermediate objects are created.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Sets `dotted` from a command-line flag; a different value already present
/// in the config is a conflict (InvalidConfig).
void apply_flag(RunConfig& cfg, const std::string& dotted, const nlohmann::json& value, const std::string& flag);

std::string sha256_hex(const std::filesystem::path& path);

/// Full command-line entry point. Returns the process exit code; failures are
/// reported as a single-line `{error, detail}` JSON object on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace knots::cli
