#pragma once

#include <stdexcept>

namespace pani {

// Error taxonomy shared by the whole library. The CLI maps ConfigError to
// exit code 2 and NumericError to exit code 3; anything else is a plain
// failure.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Caller broke a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

// Bad experiment configuration (unknown key, wrong type, invalid value).
struct ConfigError : Error {
  using Error::Error;
};

// NaN or Inf reached an exposed value; training aborts the step.
struct NumericError : Error {
  using Error::Error;
};

// Malformed file on disk (IDX stream, checkpoint).
struct FormatError : Error {
  using Error::Error;
};

// A zero-norm field was asked to be projected onto the constraint ball.
// Callers fall back to a fresh random direction.
struct DegenerateDirectionError : Error {
  using Error::Error;
};

}  // namespace pani
