#pragma once

#include <stdexcept>
#include <string>

namespace expertnet {

// Error taxonomy shared by the library and the CLI exit-code mapping.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ArgumentError : Error {
  using Error::Error;
};

struct ArityError : ArgumentError {
  using ArgumentError::ArgumentError;
};

struct NumericError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct UsageError : Error {
  using Error::Error;
};

struct LookupError : Error {
  using Error::Error;
};

// Dataset ingestion, splitting and partitioning failures.
struct DataError : Error {
  using Error::Error;
};

}  // namespace expertnet
