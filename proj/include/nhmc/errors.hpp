#pragma once

#include <stdexcept>
#include <string>

namespace nhmc {

// Raised when a kernel, distribution, observable or configuration breaks its
// invariants. Maps to CLI exit code 2.
class InvalidModel : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A theorem hypothesis does not hold for the requested experiment (for
// example a non-positive asymptotic variance). Maps to CLI exit code 3.
class HypothesisViolation : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Work or memory estimate over the configured budget. Maps to CLI exit code 4.
class BudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotIrreducible : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace nhmc
