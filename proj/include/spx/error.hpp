#pragma once

#include <stdexcept>
#include <string>

namespace spx {

// Exit-code categories shared by the library and the CLI front end.
enum class ErrorCategory : int {
  usage = 2,
  io = 3,
  format = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), category_(cat) {}
  ErrorCategory category() const { return category_; }
  int exit_code() const { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(ErrorCategory::usage, msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(ErrorCategory::io, msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(ErrorCategory::format, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(ErrorCategory::numeric, msg) {}
};

// Shape/dimension misuse of library ops.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(ErrorCategory::format, msg) {}
};

}  // namespace spx
