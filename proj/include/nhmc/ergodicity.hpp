#pragma once
// Ergodicity coefficients, sup-row norms, stationary vectors, period
// detection, and the three convergence-condition profiles for kernel
// families.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nhmc/chain_core.hpp"
#include "nhmc/matrix.hpp"

namespace nhmc {

enum class Condition {
  Cesaro,       // sup_m || (1/n) sum_t P^(m,m+t) - R ||
  AverageDiff,  // sup_m (1/n) sum_k || P_{k+m} - P ||
  DeltaSum,     // sum_k delta(P_k) / sqrt(n)
};

std::string to_string(Condition condition);
Condition condition_from_string(const std::string& name);

struct ConditionProfile {
  Condition condition = Condition::AverageDiff;
  std::vector<std::size_t> n_grid;
  std::vector<double> values;
  // Starting time m at which the sup was attained, per n (zero for DeltaSum).
  std::vector<std::size_t> argmax_m;
  // Largest m scanned; zero for DeltaSum, which has no sup over m.
  std::size_t m_sup_range = 0;
};

struct StationaryVector {
  std::vector<double> pi;
  double residual = 0.0;  // || pi P - pi ||_1
  std::size_t iterations = 0;
  bool used_linear_solve = false;
};

struct StationaryOptions {
  double tolerance = 1e-12;         // L1 distance between successive iterates
  std::size_t max_iterations = 1'000'000;
  double max_work = 1e10;           // iterations * N^2 before falling back
  double residual_limit = 1e-10;
};

// max_i sum_j |a_ij|.
double sup_row_norm(const Matrix& a);
// As above with the tail mass counted as one more column.
double sup_row_norm(const TruncatedKernel& p);

// || P_k - P || for one step of a family against a limit kernel. O(N) when
// the step shares the limit's storage, O(N^2) otherwise.
double distance_to_limit(const StepKernel& step, const TruncatedKernel& limit);

// sup over row pairs of sum_j [p(i, j) - p(l, j)]^+ by direct scan, O(N^3).
double dobrushin_delta(const TruncatedKernel& p);
// Same coefficient for a step whose rows are scale * (common row) plus a few
// band corrections; O(N) per call. Throws InvalidModel when the step's base
// kernel does not have identical rows.
double dobrushin_delta_banded(const StepKernel& step);
// Banded path when it applies, brute force on the dense kernel otherwise.
double dobrushin_delta(const StepKernel& step);

bool is_irreducible(const TruncatedKernel& p);

// Power iteration on pi <- pi P with a dense least-squares fallback.
StationaryVector stationary(const TruncatedKernel& p, const StationaryOptions& options = {});

// gcd of cycle lengths through state 0.
std::size_t period(const TruncatedKernel& p);

// || P^k - R || for each k in k_grid, R having every row equal to pi.
std::vector<double> strong_ergodicity_profile(const TruncatedKernel& p, std::span<const double> pi,
                                              std::span<const std::size_t> k_grid);
std::vector<double> strong_ergodicity_profile(const TruncatedKernel& p,
                                              std::span<const std::size_t> k_grid);

// The sup over m >= 0 is a scan over 0 <= m <= m_sup_range. Cesaro costs
// O((m_sup_range + 1) * max(n_grid) * N^2) for families with identical-row
// limits; keep its grid small.
ConditionProfile condition_profile(const KernelFamily& family, Condition condition,
                                   std::span<const std::size_t> n_grid, std::size_t m_sup_range,
                                   unsigned workers = 1);

}  // namespace nhmc
