#pragma once

#include <stdexcept>
#include <string>

namespace pipesim {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or malformed configuration (empty calibration tables, bad fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A deployment cannot fit the model and its KV cache in the given memory.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Replication acknowledgements arrived out of order.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Deadlock or unrecoverable state inside the event loop.
class SimulationError : public Error {
 public:
  using Error::Error;
};

/// Malformed trace or config file; carries the offending line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  long line() const noexcept { return line_; }

 private:
  long line_;
};

}  // namespace pipesim
