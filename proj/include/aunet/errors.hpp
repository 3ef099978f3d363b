#pragma once

#include <stdexcept>
#include <string>

namespace aunet {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training, data or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent file on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (unreadable/unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A metric has no defined value for the given inputs (e.g. surface distance of an empty mask).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string shape_str(const auto& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace detail
}  // namespace aunet
