#pragma once

#include <stdexcept>
#include <string>

namespace vsla {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (sizes, hyper-parameters, protocol choice).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input that violates a data invariant (manifest schema, split overlap, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint container that is truncated, corrupted or of an unknown version.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace vsla
