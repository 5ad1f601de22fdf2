#pragma once

#include <stdexcept>
#include <string>

namespace uapdfl {

// Dimension or shape disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values or an ill-posed numeric system.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid experiment or protocol configuration. `key()` names the offending
// setting when one is known.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what, std::string key = {})
      : std::invalid_argument(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Unknown client id or other failed lookup.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Broken protocol precondition (e.g. aggregating models of different shape).
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace uapdfl
