#pragma once

#include <stdexcept>
#include <string>

namespace bbg {

// Values mirror bbg_status in bbg.h; keep them in sync.
enum class ErrorCode {
  kInvalidArgument = 1,
  kShapeMismatch = 2,
  kNonFinite = 3,
  kIo = 4,
  kFormat = 5,
  kState = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace bbg
