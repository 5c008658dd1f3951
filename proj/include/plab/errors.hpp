#pragma once

#include <stdexcept>
#include <string>

namespace plab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A constructor or operation received an out-of-range parameter.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Grid-based validation could not reach a verdict (box too small).
class InconclusiveValidation : public Error {
 public:
  using Error::Error;
};

/// A truncation or discretisation precondition does not hold.
class AccuracyError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver hit its iteration budget.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, double last_residual, int iterations)
      : Error(what), last_residual_(last_residual), iterations_(iterations) {}

  double last_residual() const { return last_residual_; }
  int iterations() const { return iterations_; }

 private:
  double last_residual_;
  int iterations_;
};

/// A density that must stay strictly positive fell below the floating range.
class UnderflowError : public Error {
 public:
  using Error::Error;
};

/// A point or ball lies outside the region an operation is defined on.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Two fields live on different grids.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value encountered during sampling or evaluation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent experiment metadata (e.g. theta != N * beta).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file could not be read or written, or is not a valid record.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Artifacts on disk were produced by a different configuration.
class StalenessError : public Error {
 public:
  using Error::Error;
};

/// A re-run did not reproduce a recorded artifact.
class ReproducibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace plab
