#pragma once

#include <stdexcept>
#include <string>

namespace steerlab {

// Exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kArgument = 2,
  kFormat = 3,
  kNumeric = 4,
  kDegenerateDirection = 5,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept = 0;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kArgument; }
};

class ConfigError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Sequence does not fit in the model context.
class CapacityError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class FormatError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kFormat; }
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

// The two contrast passes produced (numerically) the same activations.
class DegenerateDirectionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override {
    return ExitCode::kDegenerateDirection;
  }
};

}  // namespace steerlab
