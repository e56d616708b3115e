#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clipn {

enum class ErrorCode {
  ZeroVector,
  DimMismatch,
  ShapeMismatch,
  NonPositiveTau,
  NonPositiveT,
  NonPositiveBandwidth,
  EmptyInput,
  EmptyClassName,
  EmptyText,
  BadTokenId,
  IndexOutOfRange,
  BatchTooSmall,
  NonFinite,
  DuplicateClass,
  DuplicateSection,
  Precondition,
  DivergenceDetected,
  RejectionOverflow,
  IoError,
  BadMagic,
  UnsupportedVersion,
  Truncated,
  BadManifest,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (tests, the CLI exit-code mapping) can branch on the kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace clipn
