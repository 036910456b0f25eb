#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fimode {

// Invalid arguments are reported with std::invalid_argument throughout.

/// Evaluation produced a non-finite value (e.g. a polynomial overflowed).
class NumericOverflow : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Non-finite activations or losses inside the neural operator.
class NumericFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class SolverFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class GenerationFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class TrainingFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class InvalidState : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Malformed input file. `line()` is 1-based, 0 when not applicable.
class ParseError : public std::runtime_error {
  public:
    ParseError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what)
      , line_(line) {}

    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

/// Configuration document with an unknown key or a value of the wrong type.
class ConfigError : public std::invalid_argument {
  public:
    ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key + ": " + what)
      , key_(key) {}

    const std::string& key() const noexcept { return key_; }

  private:
    std::string key_;
};

} // namespace fimode
