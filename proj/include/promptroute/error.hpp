#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace promptroute {

enum class ErrorCode {
  kInvalidRoute,
  kInvalidInstance,
  kDegenerateInstance,
  kSizeLimit,
  kShapeMismatch,
  kBackwardBeforeForward,
  kDecodeDeadlock,
  kWrongPromptLength,
  kUnstandardizedFeature,
  kEmptySet,
  kGroupTooSmall,
  kOutOfRange,
  kNonFinite,
  kMissingArtifact,
  kMissingSection,
  kParse,
  kUnsupportedEdgeWeight,
  kUnknownKind,
  kMissingBaseline,
  kConfig,
  kIo,
};

std::string_view error_code_name(ErrorCode code);

// Library-wide exception. `code` is stable and machine-readable; the CLI
// serializes it into its error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace promptroute
