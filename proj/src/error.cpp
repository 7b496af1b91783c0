#include "detox/error.hpp"

namespace detox {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kUnsupportedArchitecture: return "UnsupportedArchitecture";
    case ErrorCode::kUnknownLayer: return "UnknownLayer";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kInvalidState: return "InvalidState";
    case ErrorCode::kMissingFile: return "MissingFile";
    case ErrorCode::kBadLabel: return "BadLabel";
    case ErrorCode::kMissingColumn: return "MissingColumn";
    case ErrorCode::kDecodeError: return "DecodeError";
    case ErrorCode::kEmptyGroup: return "EmptyGroup";
    case ErrorCode::kDegenerateAttribute: return "DegenerateAttribute";
    case ErrorCode::kNumericalFailure: return "NumericalFailure";
    case ErrorCode::kZeroDirection: return "ZeroDirection";
    case ErrorCode::kUnknownMetric: return "UnknownMetric";
    case ErrorCode::kNonSpatialLayer: return "NonSpatialLayer";
    case ErrorCode::kNonDifferentiableModel: return "NonDifferentiableModel";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
      code_(code) {}

void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace detox
