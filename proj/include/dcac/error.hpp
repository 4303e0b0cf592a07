#pragma once

#include <stdexcept>
#include <string>

namespace dcac {

enum class ErrorCode {
    ShapeMismatch,
    ConfigError,
    DataError,
    IoError,
    UsageError,
    NumericError,
    VersionMismatch,
    CorruptFile,
};

// All library failures are thrown as Error; code() lets callers map to exit
// codes or branch without parsing messages.
class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::ShapeMismatch: return "shape_mismatch";
        case ErrorCode::ConfigError: return "config_error";
        case ErrorCode::DataError: return "data_error";
        case ErrorCode::IoError: return "io_error";
        case ErrorCode::UsageError: return "usage_error";
        case ErrorCode::NumericError: return "numeric_error";
        case ErrorCode::VersionMismatch: return "version_mismatch";
        case ErrorCode::CorruptFile: return "corrupt_file";
    }
    return "unknown";
}

}  // namespace dcac
