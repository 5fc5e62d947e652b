#pragma once

#include <stdexcept>
#include <string>

namespace hkflow {

/// Failure categories surfaced by the library. Callers that need to react to
/// a specific condition (e.g. the CLI mapping failures to exit codes) switch on
/// the kind; everyone else just reads what().
enum class ErrorKind {
  InvalidArgument,
  ResolutionMismatch,
  NonPositiveMetric,
  PoleRegularity,
  UnsupportedPoints,
  MismatchedModels,
  BlowUp,
  StepUnderflow,
  StencilRange,
  SolverBudget,
  UncertifiedWeight,
  RangeError,
  Normalization,
  InversionFailure,
  DegenerateTrials,
  PositivityFloor,
  Config,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace hkflow
