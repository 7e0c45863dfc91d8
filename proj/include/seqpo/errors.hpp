#pragma once

#include <stdexcept>
#include <string>

namespace seqpo {

// Error taxonomy shared across the library. The CLI maps these onto its
// exit codes (config 2, numeric 3, io 4).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace seqpo
