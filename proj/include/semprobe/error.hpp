#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace semprobe {

enum class ErrorCode {
  ParseError,
  DuplicateId,
  DimMismatch,
  IoError,
  BadMagic,
  VersionUnsupported,
  TruncatedFile,
  EmptyInput,
  BadBand,
  MissingSlot,
  GatewayTimeout,
  RateLimited,
  MalformedResponse,
  NoLogProbs,
  AmbiguousVerdict,
  EmptyText,
  BackendUnavailable,
  CacheCorrupt,
  EmptyClusters,
  BadPartition,
  DegenerateInput,
  EmptyClass,
  MissingRecord,
  SingleClassTraining,
  NonFiniteFeature,
  SchemaMismatch,
  MissingGreedy,
  SingleClassGold,
  LengthMismatch,
  BadConfig,
  Usage,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace semprobe
