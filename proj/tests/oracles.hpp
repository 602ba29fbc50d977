#pragma once
// Independent reference computations shared by the unit tests.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "nhmc/matrix.hpp"

namespace oracle {

inline constexpr double kQ = 0.6079271018540267;             // 6 / pi^2
inline constexpr double kThetaState1 = 0.23835174068539056;  // q (1 - q), N = 1000, lumped tail

// Plain triple loop, no blocking or structure.
inline nhmc::Matrix naive_product(const nhmc::Matrix& a, const nhmc::Matrix& b) {
  nhmc::Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Example 1 kernel at step k written out from the closed form, lumped tail.
inline nhmc::Matrix example1_dense(double alpha, std::size_t k, std::size_t n) {
  const double c = 6.0 / (std::numbers::pi * std::numbers::pi);
  nhmc::Matrix m(n, n);
  const double amp = std::pow(static_cast<double>(k), -alpha);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double jj = static_cast<double>(j + 1);
      m(i, j) = c / (jj * jj);
      s += m(i, j);
    }
    m(i, n - 1) += 1.0 - s;
    const double ii = static_cast<double>(i + 1);
    const double eps = c / (ii * ii) * amp;
    m(i, i) -= eps;
    if (i + 1 < n) m(i, i + 1) += eps;
    else m(i, i) += eps;  // the (N, N+1) mass is lumped back onto N
  }
  return m;
}

inline nhmc::Matrix random_stochastic(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  nhmc::Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += m(i, j) = u(rng) + 1e-3;
    for (std::size_t j = 0; j < n; ++j) m(i, j) /= s;
  }
  return m;
}

}  // namespace oracle
