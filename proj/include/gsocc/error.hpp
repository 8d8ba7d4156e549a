#pragma once

#include <stdexcept>
#include <string>

namespace gsocc {

/// Bad argument to a library call (zero quaternion, negative opacity, ...).
class InvalidParameter : public std::invalid_argument {
 public:
  explicit InvalidParameter(const std::string& what) : std::invalid_argument(what) {}
};

/// A Gaussian set that cannot be evaluated (e.g. every opacity is zero).
class InvalidSet : public std::invalid_argument {
 public:
  explicit InvalidSet(const std::string& what) : std::invalid_argument(what) {}
};

/// Index outside a grid or image.
class OutOfRange : public std::out_of_range {
 public:
  explicit OutOfRange(const std::string& what) : std::out_of_range(what) {}
};

/// Malformed file contents.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// A metric whose value is undefined for the given inputs.
class UndefinedMetric : public std::runtime_error {
 public:
  explicit UndefinedMetric(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gsocc
