#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ncatlas {

enum class ErrorCode {
    invalid_argument,
    dimension_mismatch,
    io_error,
    parse_error,
    incomplete_checkpoint,
    shape_mismatch,
    non_finite,
    unknown_token,
    multi_token,
    out_of_range,
    incompatible,
    not_found,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this exception; the code lets the CLI and
// the HTTP service map failures onto exit codes / structured responses.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace ncatlas
