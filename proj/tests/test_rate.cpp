#include <doctest.h>

#include <cmath>
#include <random>

#include "nhmc/errors.hpp"
#include "nhmc/rate.hpp"
#include "oracles.hpp"

using namespace nhmc;

namespace {

Observable random_observable(std::size_t n, std::mt19937_64& rng, double scale = 3.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return Observable(std::move(v), u(rng));
}

Matrix random_psd(std::size_t m, std::size_t rank, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> lam(0.2, 2.0);
  // Random orthonormal basis by Gram-Schmidt.
  std::vector<std::vector<double>> basis;
  while (basis.size() < m) {
    std::vector<double> v(m);
    for (double& x : v) x = g(rng);
    for (const auto& b : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < m; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < m; ++i) v[i] -= d * b[i];
    }
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-6) continue;
    for (double& x : v) x /= nrm;
    basis.push_back(v);
  }
  Matrix q(m, m);
  for (std::size_t r = 0; r < rank; ++r) {
    const double l = lam(rng);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) q(a, b) += l * basis[r][a] * basis[r][b];
  }
  return q;
}

// sup_z <x,z> - z'Qz/2 by gradient ascent with step 1/lambda_max.
double numeric_sup(std::span<const double> x, const Matrix& q) {
  const std::size_t m = q.rows();
  double lmax = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < m; ++b) s += std::abs(q(a, b));
    lmax = std::max(lmax, s);
  }
  std::vector<double> z(m, 0.0), grad(m);
  for (int it = 0; it < 200000; ++it) {
    double gn = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      double s = x[a];
      for (std::size_t b = 0; b < m; ++b) s -= q(a, b) * z[b];
      grad[a] = s;
      gn += s * s;
    }
    if (gn < 1e-26) break;
    for (std::size_t a = 0; a < m; ++a) z[a] += grad[a] / lmax;
  }
  return conjugate_objective(x, z, q);
}

}  // namespace

TEST_CASE("theta examples") {
  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 1000, TailPolicy::LumpToLast);
  const auto pi = stationary(lim).pi;
  CHECK(std::abs(theta(pi, lim, Observable::constant(1000, 3.0))) <= 1e-12);
  CHECK(theta(pi, lim, Observable::indicator(1000, 0)) == doctest::Approx(oracle::kThetaState1).epsilon(1e-12));

  // Identical rows: theta is the variance under the row.
  std::mt19937_64 rng(5);
  const auto f = random_observable(1000, rng);
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t j = 0; j < 1000; ++j) {
    m1 += lim(0, j) * f(j);
    m2 += lim(0, j) * f(j) * f(j);
  }
  CHECK(theta(pi, lim, f) == doctest::Approx(m2 - m1 * m1).epsilon(1e-11));
}

TEST_CASE("theta forms agree and transform correctly") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const TruncatedKernel p(oracle::random_stochastic(50, rng));
    const auto pi = stationary(p).pi;
    const auto f = random_observable(50, rng);
    const auto forms = theta_forms(pi, p, f);
    CHECK(std::abs(forms.variance_gap - forms.conditional_variance) <= 1e-10);
    const double th = theta(pi, p, f);
    CHECK(std::abs(theta(pi, p, f + 4.2) - th) <= 1e-10);
    const double a = -1.7;
    CHECK(theta(pi, p, f * a) == doctest::Approx(a * a * th).epsilon(1e-10));
    CHECK(rate_1d(a * 0.3, theta(pi, p, f * a)) == doctest::Approx(rate_1d(0.3, th)).epsilon(1e-10));
  }
  // A non-stationary vector breaks the agreement.
  const TruncatedKernel p(Matrix::from_rows({{0.9, 0.1}, {0.2, 0.8}}));
  const std::vector<double> wrong{0.5, 0.5};
  CHECK_THROWS_AS(theta(wrong, p, Observable::indicator(2, 0)), InvalidModel);
}

TEST_CASE("rate_1d") {
  CHECK(rate_1d(0.0, 0.3) == 0.0);
  CHECK(rate_1d(1.0, 1.0) == 0.5);
  CHECK(rate_1d(0.5, 0.23836) == doctest::Approx(0.5244168).epsilon(1e-6));
  CHECK(rate_1d(0.5, oracle::kThetaState1) == doctest::Approx(0.5244350204473321).epsilon(1e-14));
  CHECK_THROWS_AS(rate_1d(1.0, 0.0), HypothesisViolation);
  CHECK_THROWS_AS(rate_1d(1.0, -1.0), HypothesisViolation);
}

TEST_CASE("q_matrix") {
  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 300, TailPolicy::LumpToLast);
  const auto pi = stationary(lim).pi;
  const std::vector<Observable> one{Observable::indicator(300, 0)};
  const Matrix q1 = q_matrix(pi, lim, one);
  CHECK(q1(0, 0) == doctest::Approx(theta(pi, lim, one[0])).epsilon(1e-14));

  const std::vector<Observable> dup{Observable::indicator(300, 0), Observable::indicator(300, 0)};
  const Matrix q2 = q_matrix(pi, lim, dup);
  CHECK(q2(0, 1) == q2(0, 0));
  CHECK(q2(1, 1) == q2(0, 0));
  CHECK(numerical_rank(q2) == 1);

  std::mt19937_64 rng(7);
  const TruncatedKernel p(oracle::random_stochastic(40, rng));
  const auto pi2 = stationary(p).pi;
  const std::vector<Observable> fs{random_observable(40, rng), random_observable(40, rng), random_observable(40, rng)};
  const Matrix q = q_matrix(pi2, p, fs);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) CHECK(q(a, b) == q(b, a));
  std::normal_distribution<double> g;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> z{g(rng), g(rng), g(rng)};
    double quad = 0.0;
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) quad += z[a] * q(a, b) * z[b];
    CHECK(std::abs(quad - theta(pi2, p, linear_combination(fs, z))) <= 1e-10);
  }
}

TEST_CASE("rate_md") {
  const Matrix id = Matrix::identity(2);
  const std::vector<double> zero{0.0, 0.0}, ones{1.0, 1.0}, e2{0.0, 1.0};
  CHECK(rate_md(zero, id) == 0.0);
  CHECK(rate_md(ones, id) == doctest::Approx(1.0));
  const Matrix d = Matrix::from_rows({{1.0, 0.0}, {0.0, 0.0}});
  CHECK(std::isinf(rate_md(e2, d)));
  CHECK(rate_md(zero, d) == 0.0);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int t = 0; t < 30; ++t) {
    const Matrix q = random_psd(2, 2, rng);
    const std::vector<double> x{g(rng), g(rng)};
    const auto conj = quadratic_conjugate(x, q);
    CHECK(conj.value == doctest::Approx(numeric_sup(x, q)).epsilon(1e-6));
    CHECK(conjugate_objective(x, conj.z, q) == doctest::Approx(conj.value).epsilon(1e-12));
    for (int probe = 0; probe < 1000; ++probe) {
      const std::vector<double> z{3 * g(rng), 3 * g(rng)};
      CHECK(conj.value >= conjugate_objective(x, z, q) - 1e-12);
    }
  }
}

TEST_CASE("rate_md level sets and half-spaces") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int t = 0; t < 20; ++t) {
    const Matrix q = random_psd(3, 3, rng);
    const double level = 0.7;
    const double bound = level_set_radius_bound(level, q);
    for (int dir = 0; dir < 200; ++dir) {
      std::vector<double> u{g(rng), g(rng), g(rng)};
      const double r1 = rate_md(u, q);
      // rate is 2-homogeneous: boundary point along u is u * sqrt(level / r1).
      const double scale = std::sqrt(level / r1);
      double norm = 0.0;
      for (double v : u) norm += v * v * scale * scale;
      CHECK(std::sqrt(norm) <= bound * (1 + 1e-12));
    }
    const std::vector<double> w{1.0, 0.0, 0.0};
    CHECK(halfspace_infimum(w, 0.4, q) == doctest::Approx(0.16 / (2 * q(0, 0))));
    // The infimum is attained at Q w x / (w'Qw).
    std::vector<double> y(3);
    for (std::size_t a = 0; a < 3; ++a) y[a] = q(a, 0) * 0.4 / q(0, 0);
    CHECK(rate_md(y, q) == doctest::Approx(halfspace_infimum(w, 0.4, q)).epsilon(1e-10));
  }
}

TEST_CASE("rate_measure_lower_bound") {
  std::mt19937_64 rng(10);
  const TruncatedKernel p(oracle::random_stochastic(30, rng));
  const auto pi = stationary(p).pi;
  std::vector<Observable> fs{random_observable(30, rng), random_observable(30, rng), random_observable(30, rng)};

  SignedMeasureOnGrid zero;
  CHECK(rate_measure_lower_bound(zero, pi, p, fs) == 0.0);

  SignedMeasureOnGrid nu;
  std::normal_distribution<double> g;
  for (std::size_t s = 0; s < 30; s += 3) nu.atoms[s] = 0.1 * g(rng);
  nu.atoms[45] = 0.05;  // beyond N: uses the tail value

  const std::span<const Observable> all(fs);
  const double x = nu.pair(fs[0]);
  CHECK(rate_measure_lower_bound(nu, pi, p, all.first(1)) ==
        doctest::Approx(rate_1d(x, theta(pi, p, fs[0]))).epsilon(1e-12));
  const double b1 = rate_measure_lower_bound(nu, pi, p, all.first(1));
  const double b2 = rate_measure_lower_bound(nu, pi, p, all.first(2));
  const double b3 = rate_measure_lower_bound(nu, pi, p, all.first(3));
  CHECK(b1 <= b2 + 1e-12);
  CHECK(b2 <= b3 + 1e-12);
}

TEST_CASE("build_rate_model") {
  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 1000, TailPolicy::LumpToLast);
  const auto model = build_rate_model(lim, {Observable::indicator(1000, 0), Observable::indicator(1000, 1)});
  CHECK(model.theta_diag[0] == doctest::Approx(oracle::kThetaState1).epsilon(1e-12));
  CHECK(model.q(0, 0) == model.theta_diag[0]);
  CHECK(model.pi.residual <= 1e-10);
  CHECK(std::abs(model.q(0, 1) - model.q(1, 0)) <= 1e-12);
}
