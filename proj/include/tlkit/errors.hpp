#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tlkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value; message names the offending field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Label vector fails normalization / nonnegativity checks.
class LabelError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class AnnotationError : public Error {
 public:
  using Error::Error;
};

class DegenerateCellError : public Error {
 public:
  using Error::Error;
};

class CropError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed binary payload; carries the byte offset of the violation.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, uint64_t offset)
      : Error(msg + " (offset " + std::to_string(offset) + ")"), offset_(offset) {}

  uint64_t offset() const { return offset_; }

 private:
  uint64_t offset_;
};

}  // namespace tlkit
