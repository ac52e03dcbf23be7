#pragma once

#include <stdexcept>
#include <string>

namespace hgt {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or unknown configuration (task ids, config files, flag values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (feature files, schema files, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset ingestion problems (unknown class ids, misaligned frames).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Tensor dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Model state used out of order (missing embeddings, empty history).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range call arguments.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hgt
