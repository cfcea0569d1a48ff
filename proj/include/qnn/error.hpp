#pragma once

#include <stdexcept>
#include <string>

namespace qnn {

// Root of every error the library throws. Subclasses map onto the CLI exit
// codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class BuildError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Raised when training produces non-finite values.
class InstabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace qnn
