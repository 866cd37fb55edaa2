#pragma once

#include <stdexcept>
#include <string>

namespace laff {

/// Invalid configuration or hyperparameter value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent on-disk data (feature files, manifests, models).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An input that admits no meaningful result: zero-norm rows, empty sequences,
/// batches without negatives.
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered during training or gradient checking.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation not defined for the configured block type or space count.
class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace laff
