#pragma once

#include <stdexcept>
#include <string>

namespace pipa {

/// Malformed arguments, records, configs or files.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A primitive evaluated outside its domain, e.g. log of a nonpositive value.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite intermediate values or probabilities that underflowed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Work that would exceed a configured budget (enumeration size, table size).
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidInput(what);
}

}  // namespace pipa
