#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stnlab {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Rejected input: shape mismatch, out-of-range value, violated precondition.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (IDX payloads, config files, CSV).
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error(msg) {}
  ParseError(const std::string& msg, std::size_t byte_offset)
      : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_ = 0;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// |det| of the 2x2 linear part too small to invert.
class SingularTransformError : public Error {
 public:
  using Error::Error;
};

// First column of the linear part is ~0; no angle to extract.
class DegenerateTransformError : public Error {
 public:
  using Error::Error;
};

// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, int epoch)
      : Error(msg + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Checkpoint container problems, split by failure class.
class CheckpointError : public Error {
 public:
  enum class Kind { VersionMismatch, CorruptLength, UnknownParameter, BadMagic };
  CheckpointError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace stnlab
