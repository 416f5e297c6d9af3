#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace crdw {

enum class ErrorCode {
  kInvalidArgument,
  kNotSchurStable,
  kNonConvergence,
  kNotPositiveDefinite,
  kNotPsd,
  kNoInputCoupling,
  kAffineDependence,
  kNormNotContractive,
  kNotPsdAtStep,
  kInsufficientData,
  kDegenerateFeasibleSet,
  kParseError,
  kValidationError,
  kIoError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kNotSchurStable: return "NotSchurStable";
    case ErrorCode::kNonConvergence: return "NonConvergence";
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kNotPsd: return "NotPSD";
    case ErrorCode::kNoInputCoupling: return "NoInputCoupling";
    case ErrorCode::kAffineDependence: return "AffineDependence";
    case ErrorCode::kNormNotContractive: return "NormNotContractive";
    case ErrorCode::kNotPsdAtStep: return "NotPSDAtStep";
    case ErrorCode::kInsufficientData: return "InsufficientData";
    case ErrorCode::kDegenerateFeasibleSet: return "DegenerateFeasibleSet";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kValidationError: return "ValidationError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace crdw
