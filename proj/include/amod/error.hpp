#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace amod {

enum class ErrorCode {
  InvalidArgument,
  ConfigInvalid,
  IoError,
  MalformedRecord,
  UnknownLabel,
  AmbiguousLabel,
  EmptyText,
  DuplicateId,
  InsufficientSamples,
  MissingEmbedding,
  DimensionMismatch,
  ZeroVector,
  NonFiniteEntry,
  EmptyIndex,
  Transport,
  BadStatus,
  Timeout,
  MockScriptExhausted,
  MalformedChain,
  InvariantViolation,
  TokenOutOfRange,
  NonFiniteInput,
  LengthMismatch,
  EmptyInput,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library. `attachment` carries bulky context
// that does not belong in what(): a raw completion, an HTTP body excerpt.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string attachment = {})
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        attachment_(std::move(attachment)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& attachment() const noexcept { return attachment_; }

 private:
  ErrorCode code_;
  std::string attachment_;
};

}  // namespace amod
