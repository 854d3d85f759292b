#pragma once

#include <stdexcept>
#include <string>

namespace dynasty {

// Root of every error thrown by the library. The CLI maps any Error to exit
// code 2 (data/contract failure).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an operation's rule.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid settings: unknown names, out-of-range hyperparameters, empty splits.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A function expected to be deterministic produced two different results.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input data is malformed, missing or too short.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynasty
