#pragma once

#include <stdexcept>
#include <string>

namespace ipf {

// Exception hierarchy. The CLI maps each family onto a process exit code.

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad or missing input data: malformed CSV, absent files, empty segmentation.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : DataError {
  using DataError::DataError;
};

// Mathematical failure: singular designs, non-finite values, shape mismatch.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SingularDesignError : NumericalError {
  using NumericalError::NumericalError;
};

struct ShapeError : NumericalError {
  using NumericalError::NumericalError;
};

}  // namespace ipf
