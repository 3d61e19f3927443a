#pragma once

#include <stdexcept>
#include <string>

namespace safer {

// Error taxonomy used across the library. Every failure carries a message that
// names the offending object (parameter, file, line, epoch) so callers can act
// on it without a debugger.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

}  // namespace safer
