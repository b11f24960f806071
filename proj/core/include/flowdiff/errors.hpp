#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace flowdiff {

// Base class for every error thrown by the library. Catching this is enough
// to intercept anything flowdiff raises on its own.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed bytes while parsing a serialized artifact (tensor file,
// checkpoint, image). Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg), byte_offset_(0) {}
  FormatError(const std::string& msg, std::uint64_t byte_offset)
      : Error(msg + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::uint64_t byte_offset() const { return byte_offset_; }

 private:
  std::uint64_t byte_offset_;
};

// An argument violated a documented precondition (bad range, bad enum value,
// unmet structural requirement).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes incompatible with the requested operation.
class ShapeError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

// A NaN or infinity appeared where finite values are required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration document. Messages name the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (missing file, unwritable path, short read).
class IoError : public Error {
 public:
  using Error::Error;
};

// Training aborted after repeated non-finite losses. State at the last good
// checkpoint remains on disk.
class TrainAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace flowdiff
