#pragma once

#include <stdexcept>
#include <string>

namespace wsd {

// Base for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument or configuration supplied by the caller.
struct ArgumentError : Error {
  using Error::Error;
};

// Tensor shape mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// Malformed file container (magic, version, truncation).
struct FormatError : Error {
  using Error::Error;
};

// Structurally valid file with invalid payload (non-finite values, duplicates).
struct DataError : Error {
  using Error::Error;
};

// Failure raised during optimization (e.g. non-finite gradients).
struct TrainError : Error {
  using Error::Error;
};

}  // namespace wsd
