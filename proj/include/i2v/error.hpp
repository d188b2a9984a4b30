#pragma once

#include <stdexcept>
#include <string>

namespace i2v {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kInput = 2,
  kCompatibility = 3,
  kDivergence = 4,
};

// Malformed input, invalid configuration, or a violated precondition.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint and a cohort (or two artifacts) that do not belong together.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf produced during training or evaluation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not agree for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace i2v
