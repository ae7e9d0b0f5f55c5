#pragma once

#include <stdexcept>
#include <string>

namespace flexidepth {

// Shape mismatches, out-of-range ids, unknown enum names.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// KV cache / position bookkeeping out of sync with the caller.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN / Inf encountered where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File carries an unsupported magic or version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated file content; `line` is 1-based, 0 when not line-oriented.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace flexidepth
