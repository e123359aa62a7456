#pragma once

#include <stdexcept>
#include <string>

namespace pqd {

// Error taxonomy maps onto process exit codes: ConfigError -> 2,
// IoError -> 3, InvariantError -> 4.

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class InvariantError : public std::runtime_error {
 public:
  explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pqd
