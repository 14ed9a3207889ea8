#pragma once

#include <stdexcept>
#include <string>

namespace lgq {

enum class ErrorKind {
  kInvalidArgument,
  kShapeMismatch,
  kInvalidEfficiency,
  kNotHurwitz,
  kSingular,
  kSingularCovariance,
  kNoConvergence,
  kNonFiniteValue,
  kIdentityViolation,
  kDegeneratePhase,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kInvalidEfficiency: return "InvalidEfficiency";
    case ErrorKind::kNotHurwitz: return "NotHurwitz";
    case ErrorKind::kSingular: return "Singular";
    case ErrorKind::kSingularCovariance: return "SingularCovariance";
    case ErrorKind::kNoConvergence: return "NoConvergence";
    case ErrorKind::kNonFiniteValue: return "NonFiniteValue";
    case ErrorKind::kIdentityViolation: return "IdentityViolation";
    case ErrorKind::kDegeneratePhase: return "DegeneratePhase";
  }
  return "Unknown";
}

/// Every failure raised by the library. `kind()` distinguishes validation
/// problems (bad input) from numerical ones.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool is_validation() const noexcept {
    return kind_ == ErrorKind::kInvalidArgument || kind_ == ErrorKind::kShapeMismatch ||
           kind_ == ErrorKind::kInvalidEfficiency || kind_ == ErrorKind::kDegeneratePhase;
  }

 private:
  ErrorKind kind_;
};

}  // namespace lgq
