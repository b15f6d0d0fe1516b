#pragma once

#include <stdexcept>
#include <string>

namespace m2unet {

// Error categories map onto the CLI exit-code contract (1 usage, 2 data, 3 numeric).
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

/// Malformed operator input: shape or length mismatches.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Non-finite values or a diverged optimisation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Caller misuse: bad flags, unknown names, missing saved context.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

/// Malformed or mismatching weight / fixture / image file.
class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error(ErrorKind::data, what) {}
};

}  // namespace m2unet
