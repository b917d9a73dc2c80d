#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace attrib {

enum class ErrorCode {
  kShapeMismatch,
  kNonFinite,
  kOutOfRange,
  kUnsupportedLayer,
  kUnsupportedModel,
  kFormat,
  kTruncated,
  kVersion,
  kInvalidArgument,
  kDomainMismatch,
  kIo,
  kConfig,
};

std::string_view error_code_name(ErrorCode code);

// Every failure in the library surfaces as this exception. The code is stable
// and machine-readable; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace attrib
