#pragma once

#include <stdexcept>
#include <string>

namespace fednas {

// Error categories thrown across the library. The CLI maps any of them to a
// nonzero exit code with the message on stderr.
struct EncodingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StructuralError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fednas
