#pragma once

#include <stdexcept>
#include <string>

namespace evrot {

enum class ErrorKind { Usage, Input, Range, Parse, Numerical };

// Process exit code for each kind: 2 usage, 3 data, 4 numerical.
constexpr int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Usage: return 2;
    case ErrorKind::Numerical: return 4;
    default: return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return exit_code_for(kind_); }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& w) : Error(ErrorKind::Input, w) {}
};

struct RangeError : Error {
  explicit RangeError(const std::string& w) : Error(ErrorKind::Range, w) {}
};

struct ParseError : Error {
  ParseError(const std::string& file, std::size_t line, const std::string& w)
      : Error(ErrorKind::Parse, file + ":" + std::to_string(line) + ": " + w), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::Numerical, w) {}
};

// Rotation at the log-map cut locus (angle ~ pi) or a warp at a panorama pole.
struct DegenerateError : NumericalError {
  explicit DegenerateError(const std::string& w) : NumericalError(w) {}
};

// Rank-deficient least-squares system while fitting control poses.
struct FitError : NumericalError {
  explicit FitError(const std::string& w) : NumericalError(w) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::Usage, w) {}
};

}  // namespace evrot
