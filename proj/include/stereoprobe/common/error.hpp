#pragma once

#include <stdexcept>
#include <string>

namespace stereoprobe {

// Exit codes used by the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 1;
inline constexpr int kExitComputeError = 2;

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return kExitInputError; }
};

// Bad user input: token ids out of range, malformed sentences, bad ranges.
class InputError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration or tensor shapes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Weight archive or tokenizer files that cannot be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Dataset records that violate the expected schema.
class IngestError : public Error {
 public:
  using Error::Error;
};

// Failures during numerical work (non-finite values, divergence).
class ComputeError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return kExitComputeError; }
};

class TrainingError : public ComputeError {
 public:
  using ComputeError::ComputeError;
};

}  // namespace stereoprobe
