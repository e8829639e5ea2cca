#include "aggquery/error.hpp"

namespace aggquery {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::Duplicate: return "duplicate";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::Parse: return "parse_error";
    case ErrorCode::Schema: return "schema_error";
    case ErrorCode::Config: return "config_error";
    case ErrorCode::BudgetExceeded: return "budget_exceeded";
    case ErrorCode::Transport: return "transport_error";
    case ErrorCode::Unscripted: return "unscripted_prompt";
    case ErrorCode::Io: return "io_error";
    }
    return "unknown";
}

} // namespace aggquery
