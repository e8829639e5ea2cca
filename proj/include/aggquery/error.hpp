#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aggquery {

enum class ErrorCode {
    InvalidArgument,
    NotFound,
    Duplicate,
    Conflict,
    Parse,
    Schema,
    Config,
    BudgetExceeded,
    Transport,
    Unscripted,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library. `detail` carries auxiliary context
/// such as the raw backend response that failed to parse.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string message, std::string detail = {})
        : std::runtime_error(std::move(message)), code_(code), detail_(std::move(detail)) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

    /// Transport failures may succeed on a later attempt.
    bool retryable() const noexcept { return code_ == ErrorCode::Transport; }

private:
    ErrorCode code_;
    std::string detail_;
};

} // namespace aggquery
