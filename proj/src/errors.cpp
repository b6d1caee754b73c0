#include "fieldcycle/errors.hpp"

namespace fieldcycle {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::OutOfDomain: return "OutOfDomain";
    case ErrorKind::FieldNotReachable: return "FieldNotReachable";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::NonMonotonicModel: return "NonMonotonicModel";
    case ErrorKind::DistanceExceedsTravel: return "DistanceExceedsTravel";
    case ErrorKind::InvalidTarget: return "InvalidTarget";
    case ErrorKind::SpecInvalid: return "SpecInvalid";
    case ErrorKind::NearDivergence: return "NearDivergence";
    case ErrorKind::StepTooCoarse: return "StepTooCoarse";
    case ErrorKind::NonlinearRegime: return "NonlinearRegime";
    case ErrorKind::FitDiverged: return "FitDiverged";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::SchemaViolation: return "SchemaViolation";
    case ErrorKind::UnknownKind: return "UnknownKind";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::SpecInvalid:
    case ErrorKind::SchemaViolation:
    case ErrorKind::UnknownKind:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::Io:
    case ErrorKind::InvalidTarget:
    case ErrorKind::DistanceExceedsTravel:
      return 3;
    default:
      return 4;
  }
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace fieldcycle
