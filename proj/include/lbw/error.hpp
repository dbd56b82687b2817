// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lbw {

enum class ErrorCode {
    invalid_argument,
    invalid_pose,
    sampling_exhausted,
    parse_error,
    non_monotone_timestamps,
    out_of_bounds,
    occupied_cell,
    insufficient_frames,
    indivisible_dims,
    contract_violation,
    version_mismatch,
    truncated_file,
    checksum_failure,
    io_error,
    resolution_mismatch,
    action_count_mismatch,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_pose: return "invalid_pose";
    case ErrorCode::sampling_exhausted: return "sampling_exhausted";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::non_monotone_timestamps: return "non_monotone_timestamps";
    case ErrorCode::out_of_bounds: return "out_of_bounds";
    case ErrorCode::occupied_cell: return "occupied_cell";
    case ErrorCode::insufficient_frames: return "insufficient_frames";
    case ErrorCode::indivisible_dims: return "indivisible_dims";
    case ErrorCode::contract_violation: return "contract_violation";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::truncated_file: return "truncated_file";
    case ErrorCode::checksum_failure: return "checksum_failure";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::resolution_mismatch: return "resolution_mismatch";
    case ErrorCode::action_count_mismatch: return "action_count_mismatch";
    }
    return "unknown";
}

/// Every recoverable failure in the library is reported through this type;
/// callers branch on code(), the message is for humans.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

#define LBW_REQUIRE(cond, code, msg)                     \
    do {                                                 \
        if (!(cond)) throw ::lbw::Error((code), (msg));  \
    } while (0)

}  // namespace lbw
