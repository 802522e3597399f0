#pragma once

#include <stdexcept>
#include <string>

namespace topiq {

// Error taxonomy mirrors the process exit codes: usage/config problems (1),
// data problems (2), numeric failures (3).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace topiq
