#pragma once
// Asymptotic variance theta(f), the quadratic form Q behind the
// m-dimensional rate, its convex conjugate, and finite-family lower bounds
// for the rate of a signed measure.

#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "nhmc/chain_core.hpp"
#include "nhmc/ergodicity.hpp"
#include "nhmc/matrix.hpp"

namespace nhmc {

inline constexpr double kPsdTolerance = 1e-10;
inline constexpr double kThetaAgreement = 1e-10;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct ThetaForms {
  double variance_gap = 0.0;          // sum_i pi(i) [f^2(i) - (Pf)^2(i)]
  double conditional_variance = 0.0;  // sum_i pi(i) sum_j p(i,j) [f(j) - (Pf)(i)]^2
};

// (Pf)(i) including the tail column.
std::vector<double> conditional_mean(const TruncatedKernel& p, const Observable& f);

ThetaForms theta_forms(std::span<const double> pi, const TruncatedKernel& p, const Observable& f);

// The variance-gap value. Throws InvalidModel when the two forms differ by
// more than kThetaAgreement * max(1, M^2), which means pi is not stationary
// for p or the kernel leaks mass.
double theta(std::span<const double> pi, const TruncatedKernel& p, const Observable& f);

// x^2 / (2 theta). Throws HypothesisViolation unless theta > 0.
double rate_1d(double x, double theta_value);

// Q[a][b] = sum_i pi(i) [f_a(i) f_b(i) - (Pf_a)(i) (Pf_b)(i)]. Throws
// InvalidModel if Q has an eigenvalue below -psd_tolerance.
Matrix q_matrix(std::span<const double> pi, const TruncatedKernel& p,
                std::span<const Observable> observables, double psd_tolerance = kPsdTolerance);

struct QuadraticConjugate {
  double value = 0.0;     // sup_z <x,z> - z'Qz/2, possibly +inf
  std::vector<double> z;  // maximizer Q^+ x; empty when value is +inf
};

// Closed form through the eigendecomposition of Q: eigenvalues below
// 1e-10 * lambda_max are treated as zero, and x counts as outside range(Q)
// when its component there exceeds 1e-8 * |x|.
QuadraticConjugate quadratic_conjugate(std::span<const double> x, const Matrix& q);
double rate_md(std::span<const double> x, const Matrix& q);

// <x,z> - z'Qz/2.
double conjugate_objective(std::span<const double> x, std::span<const double> z, const Matrix& q);

// inf { rate_md(y, Q) : <w, y> >= x }.
double halfspace_infimum(std::span<const double> w, double x, const Matrix& q);

// Radius bound sqrt(2 l lambda_max) for the level set {rate_md <= l}.
double level_set_radius_bound(double level, const Matrix& q);

std::size_t numerical_rank(const Matrix& q);
std::vector<double> eigenvalues(const Matrix& q);

// Finitely supported signed measure; states are identified with the integer
// points 1, 2, ... (0-based keys here). Keys >= N carry the observable's
// tail value.
struct SignedMeasureOnGrid {
  std::map<std::size_t, double> atoms;

  [[nodiscard]] double pair(const Observable& f) const;
  [[nodiscard]] double total_variation() const;
};

// rate_md of (<f_1,nu>, ..., <f_m,nu>) under the Q of the family; a lower
// bound for the rate of nu over all bounded f.
double rate_measure_lower_bound(const SignedMeasureOnGrid& nu, std::span<const double> pi,
                                const TruncatedKernel& p, std::span<const Observable> observables);

struct RateModel {
  StationaryVector pi;
  TruncatedKernel p;
  std::vector<Observable> observables;
  Matrix q;
  std::vector<double> theta_diag;
  std::vector<ThetaForms> forms;
  double psd_tolerance = kPsdTolerance;
};

RateModel build_rate_model(const TruncatedKernel& p, std::vector<Observable> observables,
                           double psd_tolerance = kPsdTolerance);

}  // namespace nhmc
