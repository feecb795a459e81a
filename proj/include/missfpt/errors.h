#pragma once

#include <stdexcept>
#include <string>

namespace missfpt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid modality spec or model configuration.
class SpecError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite activations, NaN loss, failed gradient check.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Mask / sample / spec misalignment.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Truncated or corrupted blob, version mismatch.
class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace missfpt
