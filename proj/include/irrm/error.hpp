#pragma once

#include <stdexcept>
#include <string>

namespace irrm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or configuration do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input files, datasets or serialized data are unusable.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or consumed non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Command-line flags or configuration files are malformed.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace irrm
