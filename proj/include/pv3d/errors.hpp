#pragma once

#include <stdexcept>
#include <string>

namespace pv3d {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized input (wrong token count, unparsable number).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that breaks a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value or unreadable config file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Missing or inconsistent dataset content.
class DataError : public Error {
 public:
  using Error::Error;
};

// A loss or code became non-finite, or an optimization diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class EmptyCloudError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

// Warping produced no visible pixels, so the pair has no error value.
class UndefinedPairError : public Error {
 public:
  using Error::Error;
};

}  // namespace pv3d
