#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace omnimol {

/// Shapes that do not conform for the requested op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Values outside an op's domain (bad axis, id out of range, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: wrong call order, invalid counts, non-scalar loss.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Unknown token symbol while splitting a molecule string.
class LexicalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed corpus or batch content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config document that violates the schema.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or incompatible binary file. Carries the byte offset at which
/// the problem was detected.
class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace omnimol
