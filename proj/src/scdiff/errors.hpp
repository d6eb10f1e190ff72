#pragma once

#include <stdexcept>
#include <string>

namespace scdiff {

/// Base class for every error raised by the library. The C API maps each
/// subclass onto a distinct status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument or a configuration value was violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file did not follow its declared binary or text layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint or file was written by an incompatible version/config.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// A callable returned something that breaks its declared contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (NaN loss).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// No zero crossing was found where a surface was required.
class EmptySurfaceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace scdiff
