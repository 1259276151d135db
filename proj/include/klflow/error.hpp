#pragma once

#include <stdexcept>
#include <string>

namespace klflow {

/// A caller broke a documented precondition (shape mismatch, empty batch, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A numerical evaluation left its domain (log of non-positive, NaN/Inf, underflow).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file: config, checkpoint or CSV.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KLFLOW_REQUIRE(cond, msg)                                       \
  do {                                                                  \
    if (!(cond)) throw ::klflow::ContractViolation(std::string(msg));   \
  } while (0)

}  // namespace klflow
