#include "ncatlas/error.hpp"

namespace ncatlas {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::incomplete_checkpoint: return "incomplete_checkpoint";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::unknown_token: return "unknown_token";
    case ErrorCode::multi_token: return "multi_token";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::incompatible: return "incompatible";
    case ErrorCode::not_found: return "not_found";
    }
    return "unknown";
}

} // namespace ncatlas
