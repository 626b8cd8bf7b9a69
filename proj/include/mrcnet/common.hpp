#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mrc {

using i64 = std::int64_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

// Error taxonomy. ConfigError: bad hyperparameters, caught at construction.
// ShapeError: tensor contract violated at call time. UsageError: API misuse
// (e.g. backward on a consumed tape). IoError: filesystem / parse failures.
// The CLI maps UsageError to exit 2 and everything else to exit 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class Axis : int { N = 0, C = 1, H = 2, W = 3 };

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::N: return "N";
    case Axis::C: return "C";
    case Axis::H: return "H";
    case Axis::W: return "W";
  }
  return "?";
}

}  // namespace mrc
