#pragma once

#include <stdexcept>
#include <string>

namespace hsnn {

// Every error carries a short machine-readable code; the CLI prints it as
// "error: <code>: <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

// Index / snapshot staleness or version skew.
class StaleError : public Error {
 public:
  explicit StaleError(const std::string& message) : Error("stale", message) {}
};

}  // namespace hsnn
