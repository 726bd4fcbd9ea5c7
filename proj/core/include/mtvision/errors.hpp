#pragma once

#include <stdexcept>
#include <string>

namespace mtv {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a cross-reference or dimension constraint.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArityError : public Error {
 public:
  using Error::Error;
};

class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract (missing coefficients, bad mode, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// A loss component came out NaN/Inf; carries the offending task name.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& task, const std::string& msg)
      : Error(msg), task_(task) {}
  const std::string& task() const { return task_; }

 private:
  std::string task_;
};

/// Optimizer parameter groups overlap or miss a parameter.
class PartitionError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtv
