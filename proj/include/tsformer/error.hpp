#pragma once

#include <stdexcept>
#include <string>

namespace tsf {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters, filter cutoffs, flags, or other settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or degenerate input data (missing blocks, zero-variance trials, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape contract violations.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, undefined metrics, failed gradient checks.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace tsf
