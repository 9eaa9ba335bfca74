#pragma once

#include <stdexcept>
#include <string>

namespace histonet {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
//   config/shape/broadcast/contract -> 2, data/io/split -> 3, numeric -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Shape-incompatible operands of a broadcasting elementwise op.
struct BroadcastError : ShapeError {
  using ShapeError::ShapeError;
};

struct ConfigError : Error {
  using Error::Error;
};

// An API precondition was violated (non-scalar backward root, missing grads, ...).
struct ContractError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// A stratum cannot populate every requested split.
struct SplitError : DataError {
  using DataError::DataError;
};

// NaN/Inf escaped a numeric computation (e.g. diverging loss).
struct NumericError : Error {
  using Error::Error;
};

}  // namespace histonet
