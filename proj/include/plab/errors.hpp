#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace plab {

/// Tensor shapes or index sets that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite ones are required (NaN gradients, diverged objectives).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input on a documented operation contract (bad probabilities, empty split, ...).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Binary artifact parsing failures. The kind lets callers tell them apart.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, bad_version, truncated, count_mismatch, bad_length, bad_value };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Configuration problems; carries the offending line (0 for command-line flags).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A pipeline step was asked to run before its inputs exist.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace plab
