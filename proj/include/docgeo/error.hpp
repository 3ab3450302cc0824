#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace docgeo {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  OutOfRange,
  NotConverged,
  Io,
  Format,
  Config,
  MissingData,
  Diverged,
};

std::string_view error_code_name(ErrorCode code);

/// Library-wide exception. The code is stable and printed by the CLI as
/// `error: <CODE>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace docgeo
