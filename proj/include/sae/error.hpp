#ifndef SAE_ERROR_HPP
#define SAE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace sae {

// Stable error codes. The CLI maps these onto process exit codes, so the
// numbering is part of the external contract (see docs/file_formats.md).
enum class ErrorCode {
  Other = 1,
  ConfigError = 2,
  MissingInput = 3,
  GridMismatch = 4,
  ArgumentError = 5,
  IoUnreadable = 6,
  IoUnknownFormat = 7,
  IoHeaderMismatch = 8,
  IoCorruptPayload = 9,
  NumericError = 10,
  Unsupported = 11,
};

inline const char* error_kind(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError: return "config_error";
    case ErrorCode::MissingInput: return "missing_input";
    case ErrorCode::GridMismatch: return "grid_mismatch";
    case ErrorCode::ArgumentError: return "argument_error";
    case ErrorCode::IoUnreadable: return "io_unreadable";
    case ErrorCode::IoUnknownFormat: return "io_unknown_format";
    case ErrorCode::IoHeaderMismatch: return "io_header_mismatch";
    case ErrorCode::IoCorruptPayload: return "io_corrupt_payload";
    case ErrorCode::NumericError: return "numeric_error";
    case ErrorCode::Unsupported: return "unsupported";
    default: return "error";
  }
}

class SaeError : public std::runtime_error {
 public:
  SaeError(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw SaeError(code, msg);
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace sae

#endif  // SAE_ERROR_HPP
