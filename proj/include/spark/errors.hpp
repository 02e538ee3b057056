#pragma once

#include <stdexcept>
#include <string>

namespace spark {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or inconsistent dimensions supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated (e.g. a target row that is not stochastic).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Peers disagree on the message layout (sketch width, layer table, codec).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A configured memory cap would be exceeded.
class ResourceError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or runaway numerics.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint container is unreadable or from an incompatible version.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace spark
