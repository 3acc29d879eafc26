#pragma once

#include <stdexcept>
#include <string>

namespace merlin {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Syntax errors in the model language.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A syntactically valid model that cannot be fitted to the given data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Result-file problems: corrupt documents and schema version mismatches.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace merlin
