#pragma once

#include <stdexcept>
#include <string>

namespace incseg {

/// Base for every error raised by the library. The CLI maps `ConfigError`
/// and `UsageError` to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};
/// Manifest or config content that does not follow its schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
/// Corrupt, truncated or version-mismatched binary file.
class FormatError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class UsageError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};
class DegenerateDataError : public DataError {
 public:
  using DataError::DataError;
};
/// Non-finite values met during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace incseg
