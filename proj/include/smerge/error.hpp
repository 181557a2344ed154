// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smerge {

/// Stable error codes. The string forms are part of the CLI contract.
enum class ErrorCode {
    ShapeMismatch,
    NonFinite,
    Asymmetric,
    NotOrthonormal,
    NoConvergence,
    MissingManifest,
    MalformedManifest,
    ByteLength,
    DuplicateName,
    UnsupportedDtype,
    Checksum,
    InconsistentRank,
    AdapterMeta,
    UnmatchedParams,
    MissingLayer,
    ArchMismatch,
    EmptyLanguageSet,
    TooFewSpecialists,
    RankTooSmall,
    InvalidConfig,
    Usage,
    Io,
};

inline std::string_view error_code_name(ErrorCode code) {
    switch (code) {
    case ErrorCode::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::NonFinite: return "E_NON_FINITE";
    case ErrorCode::Asymmetric: return "E_ASYMMETRIC";
    case ErrorCode::NotOrthonormal: return "E_NOT_ORTHONORMAL";
    case ErrorCode::NoConvergence: return "E_NO_CONVERGENCE";
    case ErrorCode::MissingManifest: return "E_MISSING_MANIFEST";
    case ErrorCode::MalformedManifest: return "E_MALFORMED_MANIFEST";
    case ErrorCode::ByteLength: return "E_BYTE_LENGTH";
    case ErrorCode::DuplicateName: return "E_DUPLICATE_NAME";
    case ErrorCode::UnsupportedDtype: return "E_UNSUPPORTED_DTYPE";
    case ErrorCode::Checksum: return "E_CHECKSUM";
    case ErrorCode::InconsistentRank: return "E_INCONSISTENT_RANK";
    case ErrorCode::AdapterMeta: return "E_ADAPTER_META";
    case ErrorCode::UnmatchedParams: return "E_UNMATCHED_PARAMS";
    case ErrorCode::MissingLayer: return "E_MISSING_LAYER";
    case ErrorCode::ArchMismatch: return "E_ARCH_MISMATCH";
    case ErrorCode::EmptyLanguageSet: return "E_EMPTY_LANGUAGE_SET";
    case ErrorCode::TooFewSpecialists: return "E_TOO_FEW_SPECIALISTS";
    case ErrorCode::RankTooSmall: return "E_RANK_TOO_SMALL";
    case ErrorCode::InvalidConfig: return "E_INVALID_CONFIG";
    case ErrorCode::Usage: return "E_USAGE";
    case ErrorCode::Io: return "E_IO";
    }
    return "E_UNKNOWN";
}

/// Process exit code for an error: 2 validation, 3 I/O, 4 numerical.
inline int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::Io:
    case ErrorCode::MissingManifest:
        return 3;
    case ErrorCode::NonFinite:
    case ErrorCode::NoConvergence:
    case ErrorCode::NotOrthonormal:
        return 4;
    default:
        return 2;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
          code_(code), detail_(message) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

} // namespace smerge
