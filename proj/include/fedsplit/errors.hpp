#pragma once

#include <stdexcept>
#include <string>

namespace fedsplit {

// Error taxonomy mirrors the CLI exit codes: config=2, input=3, protocol/session=4.
// Dimension/contract violations are programming errors and map to input errors
// at the CLI boundary.

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

class SessionError : public std::runtime_error {
 public:
  explicit SessionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedsplit
