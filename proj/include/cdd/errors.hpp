#pragma once

#include <stdexcept>
#include <string>

namespace cdd {

// Error classes map onto CLI exit codes: config 2, numeric 3, io 4.
// UsageError covers API misuse and is reported as a config-class failure.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, std::string detail = {})
      : std::runtime_error(what), detail_(std::move(detail)) {}

  // Optional JSON document describing the offending input.
  const std::string& detail() const { return detail_; }

 private:
  std::string detail_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an observed (x_t, x_0) pair has zero probability under the
// forward process.
class DegeneratePairError : public UsageError {
 public:
  using UsageError::UsageError;
};

}  // namespace cdd
