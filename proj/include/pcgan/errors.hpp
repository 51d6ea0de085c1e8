#pragma once

#include <stdexcept>
#include <string>

namespace pcgan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or inconsistent model/spec dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration, flags, or arguments supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing files, incomplete datasets, I/O failures.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or numerically invalid inputs (e.g. indefinite covariance).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pcgan
