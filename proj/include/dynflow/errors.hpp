#pragma once

#include <stdexcept>
#include <string>

namespace dynflow {

// Raised when tensor extents disagree (conv channel counts, concat spatial
// sizes, elementwise operands).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an operation precondition (range of t, r, non-scalar
// backward, mismatched sequence lengths).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad configuration: indivisible image size, unknown variant, empty dataset.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf encountered in a loss or gradient.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable dataset/checkpoint file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dynflow
