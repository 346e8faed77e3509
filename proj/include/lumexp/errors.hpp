#pragma once

#include <stdexcept>
#include <string>

namespace lumexp {

// Base class for all library errors. The CLI maps these to exit codes:
// validation-type errors exit 1, runtime/numerical errors exit 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: malformed files, out-of-range labels, inconsistent config.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class BoundsError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Tensor/image shape disagreement.
class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Degenerate geometry (collinear landmarks, < 3 points).
class GeometryError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Runtime failures: non-finite losses, failed matrix square roots.
class RuntimeError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

class NumericalError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

}  // namespace lumexp
