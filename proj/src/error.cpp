// SPDX-License-Identifier: Apache-2.0

#include "knots/error.hpp"

namespace knots {

std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorKind::CorruptFile: return "CorruptFile";
        case ErrorKind::IoError: return "IoError";
        case ErrorKind::IncompleteAdapter: return "IncompleteAdapter";
        case ErrorKind::RankMismatch: return "RankMismatch";
        case ErrorKind::ShapeError: return "ShapeError";
        case ErrorKind::KeyError: return "KeyError";
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::InvalidProbability: return "InvalidProbability";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::DegenerateBatch: return "DegenerateBatch";
        case ErrorKind::DegenerateVector: return "DegenerateVector";
        case ErrorKind::MissingProbe: return "MissingProbe";
        case ErrorKind::DegenerateBaseline: return "DegenerateBaseline";
        case ErrorKind::InvalidK: return "InvalidK";
        case ErrorKind::LabelSpecError: return "LabelSpecError";
        case ErrorKind::InvalidGrid: return "InvalidGrid";
    }
    return "Unknown";
}

}  // namespace knots
