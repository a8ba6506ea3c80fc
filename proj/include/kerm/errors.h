#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kerm {

// Every error the library throws derives from Error. The category decides
// the CLI exit code: validation problems are 1, bad data is 2 and broken
// internal invariants are 3.
enum class ErrorCategory { kValidation = 1, kData = 2, kInternal = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

// Bad or inconsistent configuration (pi = 0, empty graph for training, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::kValidation, what) {}
};

// Malformed input file. line() is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(ErrorCategory::kData, format(file, line, what)), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  static std::string format(const std::string& file, std::size_t line,
                            const std::string& what) {
    std::string out = file.empty() ? std::string("<input>") : file;
    if (line > 0) out += ":" + std::to_string(line);
    return out + ": " + what;
  }
  std::size_t line_;
};

class LookupError : public Error {
 public:
  explicit LookupError(const std::string& what)
      : Error(ErrorCategory::kData, what) {}
};

// Raw relation missing from a strict merge map.
class MappingError : public Error {
 public:
  explicit MappingError(const std::string& what)
      : Error(ErrorCategory::kData, what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what)
      : Error(ErrorCategory::kData, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorCategory::kInternal, what) {}
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what)
      : Error(ErrorCategory::kInternal, what) {}
};

// Raised by triplet_distance when the reliability is not positive, so its
// reciprocal is meaningless as a distance.
class NonPositiveReliability : public Error {
 public:
  explicit NonPositiveReliability(double reliability)
      : Error(ErrorCategory::kData,
              "non-positive triplet reliability " + std::to_string(reliability)),
        reliability_(reliability) {}
  double reliability() const { return reliability_; }

 private:
  double reliability_;
};

class DeterminismError : public Error {
 public:
  explicit DeterminismError(const std::string& what)
      : Error(ErrorCategory::kInternal, what) {}
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what)
      : Error(ErrorCategory::kInternal, what) {}
};

}  // namespace kerm
