#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fieldcycle {

enum class ErrorKind {
  OutOfDomain,
  FieldNotReachable,
  NoConvergence,
  NonMonotonicModel,
  DistanceExceedsTravel,
  InvalidTarget,
  SpecInvalid,
  NearDivergence,
  StepTooCoarse,
  NonlinearRegime,
  FitDiverged,
  InsufficientPoints,
  SchemaViolation,
  UnknownKind,
  UnsupportedVersion,
  Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Process exit status associated with an error kind: 3 for spec/schema
/// problems, 4 for numerical failures.
int exit_code_for(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fieldcycle
