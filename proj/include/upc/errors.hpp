#pragma once

#include <stdexcept>
#include <string>

namespace upc {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// ConfigError -> 2, NumericalError -> 3, IoError/ParseError -> 4.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or user-supplied parameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition (size mismatch, empty input, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Data failed validation (empty cloud, non-finite coordinate).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : IoError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A half-space crop removed every point; the caller must re-draw the plane.
class DegenerateCropError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace upc
