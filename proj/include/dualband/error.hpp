#pragma once

#include <stdexcept>
#include <string>

namespace dualband {

// Base for every error raised by the library. Each subtype maps to one
// failure category of the pipeline (see cli exit codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed arguments that violate an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Factorization or other numerical routine could not complete.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Cosine distance undefined for (near) zero-length vectors.
class DegenerateDirection : public Error {
 public:
  using Error::Error;
};

// Mismatched detectors, codecs or artifacts.
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

}  // namespace dualband
