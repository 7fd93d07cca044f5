#pragma once

#include <stdexcept>
#include <string>

namespace fbcp {

struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct SingularFit : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SplitViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Statistical precondition failed; carries the smallest admissible K.
struct PreconditionError : std::runtime_error {
  PreconditionError(const std::string& what, long minimal_k)
      : std::runtime_error(what), min_k(minimal_k) {}
  long min_k;
};

struct BudgetExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvariantViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct NoActiveConstraints : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Infeasible : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SolverDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fbcp
