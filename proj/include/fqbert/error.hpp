#pragma once

#include <stdexcept>
#include <string>

namespace fqbert {

// Process exit codes shared by the CLI and the property runner.
enum ExitCode : int {
  kExitOk = 0,
  kExitPropertyFailure = 1,
  kExitUsage = 2,
  kExitFormat = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return kExitUsage; }
};

// Precondition violated by the caller (bad bitwidth, lo > hi, shape mismatch).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A scale factor cannot be formed, e.g. max|W| == 0.
class DegenerateScaleError : public Error {
 public:
  using Error::Error;
};

// An activation site has no EMA statistics yet.
class NotCalibratedError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupted on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return kExitFormat; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return kExitFormat; }
};

}  // namespace fqbert
