#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace offkd {

// Base for every failure raised by the library. `kind()` is a short stable
// token used by the CLI when it prints machine-parsable errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid_argument"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

// Malformed input file. Line numbers are 1-based; 0 means "not line specific".
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t line, const std::string& message)
      : Error(path + ":" + std::to_string(line) + ": " + message),
        path_(std::move(path)),
        line_(line) {}
  const char* kind() const noexcept override { return "parse"; }
  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

// Data that parsed but breaks a schema rule; carries the offending ids.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& message, std::vector<std::string> ids)
      : Error(message + format_ids(ids)), ids_(std::move(ids)) {}
  const char* kind() const noexcept override { return "validation"; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

 private:
  static std::string format_ids(const std::vector<std::string>& ids) {
    if (ids.empty()) return {};
    std::string out = " [ids:";
    std::size_t shown = 0;
    for (const auto& id : ids) {
      if (shown == 20) {
        out += " ... (" + std::to_string(ids.size()) + " total)";
        break;
      }
      out += " " + id;
      ++shown;
    }
    return out + "]";
  }
  std::vector<std::string> ids_;
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class CheckpointError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "checkpoint"; }
};

class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
  const char* kind() const noexcept override { return "checkpoint_magic"; }
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
  const char* kind() const noexcept override { return "checkpoint_version"; }
};

class CheckpointManifestError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
  const char* kind() const noexcept override { return "checkpoint_manifest"; }
};

class ShapeMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
  const char* kind() const noexcept override { return "shape_mismatch"; }
};

}  // namespace offkd
