#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nhmc/chain_core.hpp"
#include "nhmc/errors.hpp"
#include "oracles.hpp"

using namespace nhmc;

TEST_CASE("truncated kernel clamps tiny violations and rejects real ones") {
  Matrix m = Matrix::from_rows({{0.5, 0.5 + 5e-13}, {-5e-13, 1.0}});
  TruncatedKernel k(m);
  CHECK(k(0, 1) <= 0.5 + 1e-12);
  CHECK(k(1, 0) == 0.0);
  CHECK(k.tail_mass(0) >= 0.0);
  CHECK_THROWS_AS(TruncatedKernel(Matrix::from_rows({{0.5, 0.6}, {0.5, 0.5}})), InvalidModel);
  CHECK_THROWS_AS(TruncatedKernel(Matrix::from_rows({{-0.1, 0.5}, {0.5, 0.5}})), InvalidModel);

  TruncatedKernel leaky(Matrix::from_rows({{0.25, 0.25}, {0.5, 0.5}}));
  CHECK(leaky.tail_mass(0) == doctest::Approx(0.5));
  const auto lumped = leaky.resolve_tail(TailPolicy::LumpToLast);
  CHECK(lumped(0, 1) == doctest::Approx(0.75));
  const auto renorm = leaky.resolve_tail(TailPolicy::Renormalize);
  CHECK(renorm(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("example kernels at k = 1") {
  // 1 - k^-alpha vanishes, so every diagonal entry is zero.
  const auto p1 = make_example_kernel(KernelFamily::Kind::Example1, 0.75, 0.0, 1, 50, TailPolicy::LumpToLast);
  for (std::size_t i = 0; i + 1 < 50; ++i) CHECK(p1(i, i) == doctest::Approx(0.0).epsilon(1e-15));
  // log 1 = 0 leaves Example 2 at its limit.
  const auto q1 = make_example_kernel(KernelFamily::Kind::Example2, 0.75, 1.0, 1, 50, TailPolicy::LumpToLast);
  const auto lim = make_limit_kernel(KernelFamily::Kind::Example2, 0.75, 1.0, 50, TailPolicy::LumpToLast);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 50; ++j) CHECK(q1(i, j) == lim(i, j));
}

TEST_CASE("example 1 limit rows") {
  const std::size_t n = 1000;
  const auto p = make_limit_kernel(KernelFamily::Kind::Example1, 0.75, 0.0, n, TailPolicy::LumpToLast);
  CHECK(p.has_identical_rows());
  CHECK(p(0, 0) == doctest::Approx(oracle::kQ).epsilon(1e-15));
  CHECK(p(3, 1) == doctest::Approx(oracle::kQ / 4).epsilon(1e-15));
  double finite = 0.0;
  for (std::size_t j = 1; j <= n; ++j) finite += oracle::kQ / static_cast<double>(j * j);
  const auto fam = KernelFamily::example1(0.75, n);
  CHECK(fam.truncated_mass(1'000'000'000) == doctest::Approx(1.0 - finite).epsilon(1e-6));
  // tail ~ 6 / (pi^2 N)
  CHECK(fam.truncated_mass(1'000'000'000) == doctest::Approx(oracle::kQ / n).epsilon(2e-3));
}

TEST_CASE("parameter ranges") {
  CHECK_THROWS_AS(KernelFamily::example1(0.5, 100), InvalidModel);
  CHECK_THROWS_AS(KernelFamily::example1(0.4, 100), InvalidModel);
  CHECK_THROWS_AS(KernelFamily::example1(0.75, 2), InvalidModel);
  CHECK_THROWS_AS(KernelFamily::example2(0.75, 0.0, 100), InvalidModel);
  CHECK_THROWS_AS(KernelFamily::example2(0.75, 3.0, 100), InvalidModel);  // beta > alpha e
  CHECK_NOTHROW(KernelFamily::example2(0.75, 2.0, 100));
  CHECK_THROWS_AS((void)KernelFamily::example1(0.75, 100).step(0), InvalidModel);
}

TEST_CASE("structured step matches the closed form") {
  const auto fam = KernelFamily::example1(0.75, 40);
  for (std::size_t k : {1u, 2u, 7u, 1000u}) {
    const Matrix want = oracle::example1_dense(0.75, k, 40);
    const auto got = fam.kernel_at(k);
    for (std::size_t i = 0; i < 40; ++i)
      for (std::size_t j = 0; j < 40; ++j) CHECK(got(i, j) == doctest::Approx(want(i, j)).epsilon(1e-14));
  }
}

TEST_CASE("renormalized family keeps rows stochastic") {
  const auto fam = KernelFamily::example1(0.75, 30, TailPolicy::Renormalize);
  for (std::size_t k : {1u, 3u, 100u}) {
    const auto p = fam.kernel_at(k);
    for (std::size_t i = 0; i < 30; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 30; ++j) {
        CHECK(p(i, j) >= 0.0);
        s += p(i, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-13));
    }
  }
}

TEST_CASE("kernel_product") {
  const auto fam = KernelFamily::example1(0.75, 500);
  SUBCASE("single factor of a constant family") {
    std::mt19937_64 rng(3);
    const TruncatedKernel p(oracle::random_stochastic(6, rng));
    const auto cf = KernelFamily::constant(p);
    const auto prod = kernel_product(cf, 4, 5);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(prod(i, j) == doctest::Approx(p(i, j)).epsilon(1e-15));
  }
  SUBCASE("row sums") {
    const auto prod = kernel_product(fam, 0, 2);
    for (std::size_t i = 0; i < 500; ++i) {
      double s = 0.0;
      for (double v : prod.row(i)) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("naive triple loop oracle") {
    const Matrix want = oracle::naive_product(
        oracle::naive_product(oracle::example1_dense(0.75, 1, 500), oracle::example1_dense(0.75, 2, 500)),
        oracle::example1_dense(0.75, 3, 500));
    const auto got = kernel_product(fam, 0, 3);
    CHECK(got(0, 0) == doctest::Approx(want(0, 0)).epsilon(1e-13));
    CHECK(got(17, 250) == doctest::Approx(want(17, 250)).epsilon(1e-13));
  }
  SUBCASE("splits at any intermediate time") {
    const auto small = KernelFamily::example1(0.75, 60);
    const auto whole = kernel_product(small, 2, 9);
    const Matrix split = oracle::naive_product(kernel_product(small, 2, 5).matrix(), kernel_product(small, 5, 9).matrix());
    for (std::size_t i = 0; i < 60; ++i)
      for (std::size_t j = 0; j < 60; ++j) CHECK(std::abs(whole(i, j) - split(i, j)) <= 1e-12);
  }
  CHECK_THROWS_AS(kernel_product(fam, 3, 3), InvalidModel);
}

TEST_CASE("propagate") {
  const auto fam = KernelFamily::example1(0.75, 500);
  const auto mu0 = InitialDistribution::point_mass(500, 0);
  CHECK(propagate(mu0, fam, 0).probs == std::vector<double>(mu0.probs().begin(), mu0.probs().end()));

  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 500, TailPolicy::LumpToLast);
  const auto cf = KernelFamily::constant(lim);
  const auto one = propagate(InitialDistribution::uniform(500), cf, 1);
  for (std::size_t j = 0; j < 500; ++j) CHECK(one.probs[j] == doctest::Approx(lim(0, j)).epsilon(1e-13));

  SUBCASE("total mass stays one") {
    Propagator prop(mu0, fam);
    for (int k = 0; k < 10000; ++k) prop.advance();
    CHECK(std::abs(prop.current().total_mass() - 1.0) <= 1e-10);
  }

  SUBCASE("Monte Carlo oracle at k = 10") {
    const std::size_t trials = 1'000'000;
    const auto exact = propagate(mu0, fam, 10);
    std::vector<double> counts(500, 0.0);
    const auto steps = fam.steps(1, 10);
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = make_rng(1000 + t);
      std::size_t x = mu0.sample(uniform01(rng));
      for (const auto& s : steps) x = s.row(x).sample(uniform01(rng));
      counts[x] += 1.0;
    }
    // States with at least 1e-3 mass; testing all 500 at 3 SE would
    // expect a false alarm by multiplicity alone.
    std::size_t tested = 0;
    for (std::size_t j = 0; j < 500; ++j) {
      const double p = exact.probs[j];
      if (p < 1e-3) continue;
      ++tested;
      const double se = std::sqrt(p * (1 - p) / trials);
      CHECK(std::abs(counts[j] / trials - p) <= 3 * se);
    }
    CHECK(tested >= 20);
  }
}

TEST_CASE("expected_Sn") {
  const auto fam = KernelFamily::example1(0.75, 300);
  const auto mu0 = InitialDistribution::point_mass(300, 0);
  CHECK(expected_Sn(mu0, fam, Observable::constant(300, 2.5), 40) == doctest::Approx(100.0).epsilon(1e-13));

  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 300, TailPolicy::LumpToLast);
  const auto cf = KernelFamily::constant(lim);
  CHECK(expected_Sn(mu0, cf, Observable::indicator(300, 0), 50) == doctest::Approx(50 * oracle::kQ).epsilon(1e-13));

  // Sum of propagated expectations reproduces expected_Sn.
  const auto f = Observable::capped_identity(300, 4);
  double s = 0.0;
  for (std::size_t k = 1; k <= 30; ++k) s += propagate(mu0, fam, k).expectation(f);
  CHECK(std::abs(s - expected_Sn(mu0, fam, f, 30)) <= 1e-12);
}

TEST_CASE("expected_Sn against Monte Carlo") {
  const std::size_t n_states = 1000, n = 100, trials = 1'000'000;
  const auto fam = KernelFamily::example1(0.75, n_states);
  const auto mu0 = InitialDistribution::point_mass(n_states, 0);
  const double exact = expected_Sn(mu0, fam, Observable::indicator(n_states, 0), n);
  const auto steps = fam.steps(1, n);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = make_rng(77 + t);
    std::size_t x = mu0.sample(uniform01(rng));
    double s = 0.0;
    for (const auto& st : steps) {
      x = st.row(x).sample(uniform01(rng));
      s += x == 0 ? 1.0 : 0.0;
    }
    sum += s;
    sum2 += s * s;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum2 / trials - mean * mean) / trials);
  CHECK(std::abs(mean - exact) <= 3 * se);
}

TEST_CASE("sample_trajectory") {
  const auto fam = KernelFamily::example1(0.75, 200);
  const auto mu0 = InitialDistribution::uniform(200);
  CHECK(sample_trajectory(5, mu0, fam, 300) == sample_trajectory(5, mu0, fam, 300));
  CHECK(sample_trajectory(5, mu0, fam, 300) != sample_trajectory(6, mu0, fam, 300));

  const auto id = KernelFamily::constant(TruncatedKernel::identity(7));
  const auto path = sample_trajectory(9, InitialDistribution::uniform(7), id, 50);
  for (std::size_t s : path) CHECK(s == path[0]);

  const auto lim = make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, 200, TailPolicy::LumpToLast);
  const auto cf = KernelFamily::constant(lim);
  const std::size_t n = 1'000'000;
  const auto long_path = sample_trajectory(11, InitialDistribution::point_mass(200, 0), cf, n);
  double hits = 0.0;
  for (std::size_t k = 1; k <= n; ++k) hits += long_path[k] == 0;
  const double p = lim(0, 0);
  CHECK(std::abs(hits / n - p) <= 3 * std::sqrt(p * (1 - p) / n));

  CHECK_THROWS_AS(sample_trajectory(1, InitialDistribution({0.5, 0.0}, 0.5), KernelFamily::constant(TruncatedKernel::identity(2)), 3),
                  InvalidModel);
}

TEST_CASE("example kernels stay nonnegative across k") {
  for (double alpha : {0.6, 0.75, 1.0}) {
    const auto f1 = KernelFamily::example1(alpha, 100);
    const auto f2 = KernelFamily::example2(alpha, 1.0, 100);
    for (std::size_t k : {1u, 2u, 3u, 5u, 20u, 1000u, 100000u}) {
      for (const auto* fam : {&f1, &f2}) {
        const auto s = fam->step(k);
        for (std::size_t i = 0; i < 100; ++i) {
          const RowView r = s.row(i);
          for (std::size_t j = 0; j < 100; ++j) CHECK(r.at(j) >= 0.0);
        }
      }
    }
  }
}

TEST_CASE("observables") {
  const auto f = Observable::capped_identity(10, 4);
  CHECK(f(0) == 1.0);
  CHECK(f(2) == 3.0);
  CHECK(f(9) == 4.0);
  CHECK(f.tail_value() == 4.0);
  CHECK(f.bound() == 4.0);
  CHECK(f.is_integer_valued());
  CHECK_FALSE((f * 0.5).is_integer_valued());
  const Observable fs[2] = {Observable::indicator(10, 0), Observable::indicator(10, 1)};
  const double w[2] = {2.0, -1.0};
  const auto g = linear_combination(fs, w);
  CHECK(g(0) == 2.0);
  CHECK(g(1) == -1.0);
  CHECK(g(5) == 0.0);
}
