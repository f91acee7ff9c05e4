#pragma once

#include <stdexcept>
#include <string>

namespace relctr {

// Exit-code contract used by the CLI: 0 success, 2 config error,
// 3 undefined metric, 4 training divergence.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

class UndefinedMetricError : public std::runtime_error {
 public:
  explicit UndefinedMetricError(const std::string& what)
      : std::runtime_error(what) {}
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what)
      : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const InputError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const UndefinedMetricError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const DivergenceError*>(&e) != nullptr) return 4;
  return 1;
}

}  // namespace relctr
