#pragma once

#include <stdexcept>
#include <string>

namespace mllmreid {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not line up.
struct ShapeError : Error {
  using Error::Error;
};

/// NaN/Inf produced by an operation, or a non-finite training loss.
struct NumericError : Error {
  using Error::Error;
};

/// Preconditions on argument values (out-of-range targets, empty masks, ...).
struct ValueError : Error {
  using Error::Error;
};

/// Malformed files: checkpoints, manifests, configs.
struct FormatError : Error {
  using Error::Error;
};

}  // namespace mllmreid
