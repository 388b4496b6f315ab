#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metartl {

// Configuration and input problems map to CLI exit code 1, numerical
// failures to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class EmptyBatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public NumericalError {
 public:
  NonFiniteLoss(double value, const std::string& where)
      : NumericalError("non-finite value " + std::to_string(value) + " in " + where),
        value_(value) {}

  double value() const { return value_; }

 private:
  double value_;
};

class NondeterministicLoss : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// A trajectory prefix used up (numerically) all of the policy's mass.
class DegenerateDistribution : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace metartl
