#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace usrf {

// Base for every error the library raises. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input that violates a file or data schema (wrong row counts, unknown labels, ...).
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// NaN/Inf produced during a forward pass, a gradient, or the loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments or configuration values.
class InputError : public Error {
 public:
  using Error::Error;
};

// Nothing to work with: no complete windows, empty splits.
class EmptyResultError : public Error {
 public:
  using Error::Error;
};

// Checkpoint and configuration or dataset do not belong together.
class ArtifactMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace usrf
