#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cordseg {

enum class ErrorCode {
  shape_mismatch,
  domain,
  invalid_argument,
  no_graph,
  non_scalar,
  io,
  format,
  integrity,
  not_finite,
  split_conflict,
  empty_input,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::domain: return "domain";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::no_graph: return "no_graph";
    case ErrorCode::non_scalar: return "non_scalar";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::integrity: return "integrity";
    case ErrorCode::not_finite: return "not_finite";
    case ErrorCode::split_conflict: return "split_conflict";
    case ErrorCode::empty_input: return "empty_input";
  }
  return "unknown";
}

/// Exception carrying a machine-readable code next to the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace cordseg
