#pragma once

#include <stdexcept>
#include <string>

namespace nlmkit {

// Config, CLI-flag, data-format and compatibility problems. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatches in tensor ops; message names both shapes.
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

// File read/write problems. CLI exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or probability during training/eval. CLI exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace nlmkit
