#pragma once

#include <stdexcept>
#include <string>

namespace atm {

// Failure categories double as CLI exit codes.
enum class ErrorCategory : int {
  usage = 2,
  input = 3,
  config = 4,
  numeric = 5,
  network = 6,
  internal = 7,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorCategory::usage, what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorCategory::input, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorCategory::numeric, what) {}
};

struct NetworkError : Error {
  explicit NetworkError(const std::string& what) : Error(ErrorCategory::network, what) {}
};

struct InternalError : Error {
  explicit InternalError(const std::string& what) : Error(ErrorCategory::internal, what) {}
};

}  // namespace atm
