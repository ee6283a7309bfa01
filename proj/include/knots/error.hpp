// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace knots {

enum class ErrorKind {
    ParseError,
    UnsupportedDtype,
    CorruptFile,
    IoError,
    IncompleteAdapter,
    RankMismatch,
    ShapeError,
    KeyError,
    EmptyInput,
    InvalidProbability,
    InvalidConfig,
    DegenerateBatch,
    DegenerateVector,
    MissingProbe,
    DegenerateBaseline,
    InvalidK,
    LabelSpecError,
    InvalidGrid,
};

std::string_view error_kind_name(ErrorKind kind);

/// Every failure raised by the toolkit. `kind()` is the machine-readable tag
/// the CLI reports in its `{error, detail}` JSON.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& detail)
        : std::runtime_error(detail), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    std::string_view name() const { return error_kind_name(kind_); }

private:
    ErrorKind kind_;
};

}  // namespace knots
