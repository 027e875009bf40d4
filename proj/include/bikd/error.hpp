#pragma once

#include <stdexcept>
#include <string>

namespace bikd {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes are incompatible (matmul inner dims, elementwise mismatch, ...).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A parameter or input value is out of its legal range.
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// An API contract was violated (backward on a non-scalar, empty accumulator, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// A dataset cannot be constructed as requested (insufficient samples, bad split).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// An on-disk artifact is malformed (truncated file, bad label byte, bad manifest).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

}  // namespace bikd
