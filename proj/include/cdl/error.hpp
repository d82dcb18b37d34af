#pragma once

#include <stdexcept>
#include <string>

namespace cdl {

// Bad or unreadable input data (I/O failures, malformed records).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss or metric produced a non-finite value during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cdl
