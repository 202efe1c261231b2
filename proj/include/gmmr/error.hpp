#pragma once

#include <stdexcept>
#include <string>

namespace gmmr {

/// Base error for everything the library reports. Messages are single-line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that violates a documented precondition (bad file, bad flag, bad id).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that cannot be combined by the requested primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace gmmr
