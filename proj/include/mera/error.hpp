#pragma once

#include <stdexcept>
#include <string>

namespace mera {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input, broken invariant in loaded data, bad config or bad arguments.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// File system failures (missing file, unwritable directory, truncated binary).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A probability mass collapsed below representable range.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Gradient requested through a graph node that has no backward rule.
class UnsupportedPrimitive : public Error {
 public:
  using Error::Error;
};

}  // namespace mera
