#pragma once

#include <stdexcept>
#include <string>

namespace dfast {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A forward computation produced NaN/Inf, or a value left its numeric domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data does not match the expected schema (point counts, headers, ...).
class SchemaError : public Error {
 public:
  using Error::Error;
};

// A serialized container is malformed (bad magic, version, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace dfast
