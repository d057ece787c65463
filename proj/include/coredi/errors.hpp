#pragma once

#include <stdexcept>
#include <string>

namespace coredi {

/// Base of every error raised by the library. `exit_code()` is the process
/// exit status the command-line tool reports for this category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid configuration: unknown key, bad value, violated invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// A caller broke an operation's precondition (e.g. non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Non-finite values, degenerate statistics, rank deficiency.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace coredi
