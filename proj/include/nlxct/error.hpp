#pragma once

#include <stdexcept>
#include <string>

namespace nlxct {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class label or element index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of a call was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value, unknown key, or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or format problems while reading or writing artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter became NaN/Inf during training.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace nlxct
