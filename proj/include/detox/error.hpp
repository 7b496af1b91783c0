#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace detox {

enum class ErrorCode {
  kInvalidArgument,
  kUnsupportedArchitecture,
  kUnknownLayer,
  kEmptyBatch,
  kDimensionMismatch,
  kNonFiniteLoss,
  kInvalidState,
  kMissingFile,
  kBadLabel,
  kMissingColumn,
  kDecodeError,
  kEmptyGroup,
  kDegenerateAttribute,
  kNumericalFailure,
  kZeroDirection,
  kUnknownMetric,
  kNonSpatialLayer,
  kNonDifferentiableModel,
  kConfigError,
  kIoError,
};

std::string_view error_code_name(ErrorCode code);

// Every failure in the toolkit is reported through this type; `code()` is
// the machine-readable part, `what()` names the offending input.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace detox
