#include "promptroute/error.hpp"

namespace promptroute {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidRoute: return "invalid_route";
    case ErrorCode::kInvalidInstance: return "invalid_instance";
    case ErrorCode::kDegenerateInstance: return "degenerate_instance";
    case ErrorCode::kSizeLimit: return "size_limit";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kBackwardBeforeForward: return "backward_before_forward";
    case ErrorCode::kDecodeDeadlock: return "decode_deadlock";
    case ErrorCode::kWrongPromptLength: return "wrong_prompt_length";
    case ErrorCode::kUnstandardizedFeature: return "unstandardized_feature";
    case ErrorCode::kEmptySet: return "empty_set";
    case ErrorCode::kGroupTooSmall: return "group_too_small";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kMissingArtifact: return "missing_artifact";
    case ErrorCode::kMissingSection: return "missing_section";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kUnsupportedEdgeWeight: return "unsupported_edge_weight";
    case ErrorCode::kUnknownKind: return "unknown_kind";
    case ErrorCode::kMissingBaseline: return "missing_baseline";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kIo: return "io_error";
  }
  return "unknown";
}

}  // namespace promptroute
