#pragma once

#include <stdexcept>
#include <string>

namespace grdd {

// Root of every error the library throws. The CLI maps the subclasses
// onto process exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised when a training loop sees a non-finite loss or gradient. The
// model handed to the loop is left at the last finite state.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace grdd
