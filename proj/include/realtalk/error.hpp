#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>

namespace realtalk {

enum class ErrorCode {
  invalid_argument,
  unknown_emotion,
  shape_mismatch,
  missing_file,
  schema_version,
  version_mismatch,
  truncated_payload,
  duplicate_name,
  missing_gradient,
  non_finite,
  non_deterministic,
  degenerate,
  diverged,
  incompatible_checkpoint,
  config,
  io,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::unknown_emotion: return "unknown emotion";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::missing_file: return "missing file";
    case ErrorCode::schema_version: return "unknown schema_version";
    case ErrorCode::version_mismatch: return "version mismatch";
    case ErrorCode::truncated_payload: return "truncated payload";
    case ErrorCode::duplicate_name: return "duplicate tensor name";
    case ErrorCode::missing_gradient: return "missing gradient";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::non_deterministic: return "non-deterministic forward";
    case ErrorCode::degenerate: return "degenerate input";
    case ErrorCode::diverged: return "training diverged";
    case ErrorCode::incompatible_checkpoint: return "incompatible checkpoint";
    case ErrorCode::config: return "config error";
    case ErrorCode::io: return "i/o error";
  }
  return "error";
}

// Every failure raised by the library carries a code so callers (and the CLI
// exit-status mapping) can distinguish validation problems from runtime ones.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  bool is_validation() const noexcept {
    switch (code_) {
      case ErrorCode::diverged:
      case ErrorCode::non_finite:
      case ErrorCode::non_deterministic:
      case ErrorCode::io:
        return false;
      default:
        return true;
    }
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

// Non-fatal diagnostics go through a replaceable sink (stderr by default).
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };
  return sink;
}

inline void warn(const std::string& message) {
  if (warning_sink()) warning_sink()(message);
}

}  // namespace realtalk
