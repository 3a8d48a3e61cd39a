#pragma once

#include <stdexcept>
#include <string>

namespace isblab {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TaskMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Stepping a finished episode, or otherwise misusing the env lifecycle.
struct ProtocolError : std::logic_error {
  using std::logic_error::logic_error;
};

struct Unsupported : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace isblab
