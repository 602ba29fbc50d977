#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nhmc/errors.hpp"
#include "nhmc/rate.hpp"
#include "nhmc/simulate.hpp"
#include "oracles.hpp"

using namespace nhmc;

namespace {

KernelFamily limit_family(std::size_t n) {
  return KernelFamily::constant(make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, n, TailPolicy::LumpToLast));
}

double log_binomial_pmf(std::size_t n, std::size_t k, double p) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
         (n - k) * std::log1p(-p);
}

}  // namespace

TEST_CASE("speed function") {
  CHECK(SpeedFunction(0.6)(1e4) == doctest::Approx(std::pow(1e4, 0.6)));
  CHECK_THROWS_AS(SpeedFunction(0.5), InvalidModel);
  CHECK_THROWS_AS(SpeedFunction(1.0), InvalidModel);
}

TEST_CASE("exact sum distribution, small cases") {
  const auto fam = limit_family(100);
  const auto mu0 = InitialDistribution::point_mass(100, 0);
  const auto f = Observable::indicator(100, 0);
  const double q = fam.limit()(0, 0);

  const auto d1 = exact_sum_distribution(mu0, fam, f, 1);
  CHECK(d1.support_offset == 0);
  REQUIRE(d1.pmf.size() == 2);
  CHECK(d1.pmf[0] == doctest::Approx(1 - q));
  CHECK(d1.pmf[1] == doctest::Approx(q));

  const auto d2 = exact_sum_distribution(mu0, fam, f, 2);
  REQUIRE(d2.pmf.size() == 3);
  CHECK(d2.pmf[0] == doctest::Approx((1 - q) * (1 - q)));
  CHECK(d2.pmf[1] == doctest::Approx(2 * q * (1 - q)));
  CHECK(d2.pmf[2] == doctest::Approx(q * q));

  // Binomial(2000, q) throughout.
  const auto d = exact_sum_distribution(mu0, fam, f, 2000);
  for (std::size_t k : {1100u, 1216u, 1300u}) {
    const double want = std::exp(log_binomial_pmf(2000, k, q));
    CHECK(d.pmf[k - static_cast<std::size_t>(d.support_offset)] == doctest::Approx(want).epsilon(1e-9));
  }
  CHECK_THROWS_AS(exact_sum_distribution(mu0, fam, f * 0.5, 3), InvalidModel);
}

TEST_CASE("lumpable partition") {
  // Identical rows collapse to the f classes.
  const auto flat = lumpable_partition(limit_family(50), Observable::capped_identity(50, 4), 1000);
  CHECK(*std::max_element(flat.begin(), flat.end()) == 3);
  for (auto policy : {TailPolicy::LumpToLast, TailPolicy::Renormalize}) {
    const std::size_t n_states = 50, horizon = 30;
    const auto fam = KernelFamily::example1(0.75, n_states, policy);
    for (const auto& f : {Observable::indicator(n_states, 0), Observable::capped_identity(n_states, 4)}) {
      const auto blocks = lumpable_partition(fam, f, horizon);
      const std::size_t nb = *std::max_element(blocks.begin(), blocks.end()) + 1;
      bool same_f = true;
      for (std::size_t i = 0; i < n_states; ++i)
        for (std::size_t j = 0; j < n_states; ++j)
          if (blocks[i] == blocks[j] && f(i) != f(j)) same_f = false;
      CHECK(same_f);
      double worst = 0.0;
      for (std::size_t k = 1; k <= horizon; ++k) {
        const auto d = fam.step(k).dense();
        std::vector<std::vector<double>> mass(n_states, std::vector<double>(nb, 0.0));
        for (std::size_t i = 0; i < n_states; ++i)
          for (std::size_t j = 0; j < n_states; ++j) mass[i][blocks[j]] += d(i, j);
        for (std::size_t i = 0; i < n_states; ++i)
          for (std::size_t j = i + 1; j < n_states; ++j) {
            if (blocks[i] != blocks[j]) continue;
            for (std::size_t b = 0; b < nb; ++b) worst = std::max(worst, std::abs(mass[i][b] - mass[j][b]));
          }
      }
      CHECK(worst <= 1e-12);
    }
  }
}

TEST_CASE("exact sum distribution invariants") {
  const DpOptions opt;
  for (auto policy : {TailPolicy::LumpToLast, TailPolicy::Renormalize}) {
    const auto fam = KernelFamily::example1(0.75, 80, policy);
    const auto mu0 = InitialDistribution::uniform(80);
    for (const auto& f : {Observable::indicator(80, 0), Observable::capped_identity(80, 3),
                          Observable::indicator(80, 5) * 2.0 + (-1.0)}) {
      const std::vector<std::size_t> hs{1, 7, 60};
      const auto ds = exact_sum_distributions(mu0, fam, f, hs, opt);
      for (std::size_t h = 0; h < hs.size(); ++h) {
        CHECK(std::abs(ds[h].total_mass() - 1.0) <= 1e-9);
        for (double v : ds[h].pmf) CHECK(v >= 0.0);
        CHECK(std::abs(ds[h].mean - expected_Sn(mu0, fam, f, hs[h])) <= 1e-8);
      }
    }
  }
}

TEST_CASE("exact sum distribution with initial tail mass") {
  const auto fam = limit_family(20);
  std::vector<double> probs(20, 0.0);
  probs[0] = 0.75;
  const InitialDistribution mu0(probs, 0.25);
  const auto f = Observable::capped_identity(20, 2);
  const auto d = exact_sum_distribution(mu0, fam, f, 10);
  CHECK(d.total_mass() == doctest::Approx(1.0));
  CHECK(d.mean == doctest::Approx(expected_Sn(mu0, fam, f, 10)).epsilon(1e-12));
}

TEST_CASE("exact sum distribution against Monte Carlo") {
  const std::size_t n_states = 200, n = 50, trials = 1'000'000;
  const auto fam = KernelFamily::example1(0.75, n_states);
  const auto mu0 = InitialDistribution::point_mass(n_states, 0);
  const auto f = Observable::indicator(n_states, 0);
  const auto d = exact_sum_distribution(mu0, fam, f, n);
  const auto samples = simulate_sums(mu0, fam, f, n, trials, 2024);
  std::vector<double> hist(d.pmf.size(), 0.0);
  for (double s : samples) {
    const auto idx = static_cast<long long>(s) - d.support_offset;
    if (idx >= 0 && idx < static_cast<long long>(hist.size())) hist[static_cast<std::size_t>(idx)] += 1.0;
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < d.pmf.size(); ++i) {
    const double p = d.pmf[i];
    if (p < 1e-4) continue;
    const double se = std::sqrt(p * (1 - p) / trials);
    worst = std::max(worst, std::abs(hist[i] / trials - p) / se);
  }
  CHECK(worst <= 4.0);
}

TEST_CASE("budget") {
  const auto fam = limit_family(50);
  const auto mu0 = InitialDistribution::point_mass(50, 0);
  DpOptions tiny;
  tiny.max_entries = 1e4;
  CHECK_THROWS_AS(exact_sum_distribution(mu0, fam, Observable::indicator(50, 0), 5000, tiny), BudgetExceeded);
}

TEST_CASE("simulate_sums") {
  const auto fam = KernelFamily::example1(0.75, 100);
  const auto mu0 = InitialDistribution::point_mass(100, 0);
  const auto f = Observable::capped_identity(100, 3);
  const auto one = simulate_sums(mu0, fam, f, 40, 1, 99);
  const auto path = sample_trajectory(99, mu0, fam, 40);
  double s = 0.0;
  for (std::size_t k = 1; k <= 40; ++k) s += f(path[k]);
  CHECK(one[0] == s);

  const auto a = simulate_sums(mu0, fam, f, 200, 3000, 5, 1);
  const auto b = simulate_sums(mu0, fam, f, 200, 3000, 5, 8);
  CHECK(a == b);

  const auto lim = limit_family(100);
  const std::size_t trials = 100'000, n = 50;
  const auto g = Observable::indicator(100, 0);
  const auto xs = simulate_sums(mu0, lim, g, n, trials, 17, 2);
  double m = 0.0, m2 = 0.0;
  for (double x : xs) {
    m += x;
    m2 += x * x;
  }
  m /= trials;
  const double se = std::sqrt((m2 / trials - m * m) / trials);
  CHECK(std::abs(m - n * oracle::kQ) <= 4 * se);
}

TEST_CASE("clt diagnostic") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  const std::size_t n = 10000, count = 5000;
  const double th = 0.24, es = 6000;
  std::vector<double> xs(count);
  for (double& x : xs) x = g(rng) * std::sqrt(n * th) + es;
  const auto d = clt_diagnostic(xs, es, th, n);
  CHECK(d.ks_statistic <= 1.63 / std::sqrt(static_cast<double>(count)));
  CHECK(d.variance_ratio == doctest::Approx(1.0).epsilon(0.06));

  const std::vector<double> flat(count, 3.0);
  CHECK_THROWS_AS(clt_diagnostic(flat, 3.0, th, n), InvalidModel);
  CHECK_THROWS_AS(clt_diagnostic(xs, es, 0.0, n), HypothesisViolation);
  CHECK_THROWS_AS(clt_diagnostic(std::span<const double>(xs).first(10), es, th, n), InvalidModel);
  // Known KS value: a single point at 0 against Phi.
  CHECK(ks_statistic_normal({0.0}) == doctest::Approx(0.5));
}

TEST_CASE("mdp diagnostic") {
  const std::size_t n_states = 100;
  const auto fam = limit_family(n_states);
  const auto mu0 = InitialDistribution::point_mass(n_states, 0);
  const auto f = Observable::indicator(n_states, 0);
  const double q = oracle::kQ;
  const double th = theta(stationary(fam.limit()).pi, fam.limit(), f);
  const SpeedFunction speed(0.6);
  const std::vector<double> xs{-0.4, 0.0, 0.2, 0.4, 0.8};
  const std::vector<std::size_t> ns{500, 2000};
  MdpOptions opt;
  opt.method = MdpMethod::ExactDP;
  const auto est = mdp_diagnostic(fam, mu0, f, speed, xs, ns, th, opt);
  REQUIRE(est.size() == 10);
  for (const auto& e : est) {
    CHECK(e.log_prob <= 0.0);
    CHECK(e.scaled <= 0.0);
    CHECK(e.method == MdpMethod::ExactDP);
  }
  // Upper tail at x = 0.4, n = 2000 straight from the binomial law.
  const double a = std::pow(2000.0, 0.6);
  const double t = 2000 * q + 0.4 * a;
  double tail = 0.0;
  for (std::size_t k = static_cast<std::size_t>(std::ceil(t)); k <= 2000; ++k) tail += std::exp(log_binomial_pmf(2000, k, q));
  CHECK(est[8].probability == doctest::Approx(tail).epsilon(1e-9));
  // Antitone in |x| on each side.
  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(est[h * 5 + 2].scaled >= est[h * 5 + 3].scaled);
    CHECK(est[h * 5 + 3].scaled >= est[h * 5 + 4].scaled);
    CHECK(est[h * 5 + 1].scaled >= est[h * 5 + 0].scaled - 1.0);
  }

  MdpOptions mc = opt;
  mc.method = MdpMethod::MonteCarlo;
  mc.trials = 20000;
  mc.base_seed = 3;
  const auto em = mdp_diagnostic(fam, mu0, f, speed, xs, ns, th, mc);
  for (std::size_t i = 0; i < em.size(); ++i) {
    REQUIRE(em[i].std_error.has_value());
    CHECK(std::abs(em[i].scaled - est[i].scaled) <= 4 * *em[i].std_error + 1e-12);
  }
  // Zero hits are flagged, not thrown.
  const std::vector<double> far{5.0};
  mc.trials = 1000;
  const auto ez = mdp_diagnostic(fam, mu0, f, speed, far, ns, th, mc);
  CHECK(ez[0].zero_hits);
  CHECK(std::isinf(ez[0].scaled));

  // Auto falls back to Monte Carlo when the budget is too small.
  MdpOptions au;
  au.method = MdpMethod::Auto;
  au.dp.max_entries = 100;
  au.trials = 2000;
  CHECK(mdp_diagnostic(fam, mu0, f, speed, xs, ns, th, au).front().method == MdpMethod::MonteCarlo);
  CHECK_THROWS_AS(mdp_diagnostic(fam, mu0, f, speed, xs, ns, 0.0, opt), HypothesisViolation);
}

TEST_CASE("empirical functionals") {
  const auto fam = KernelFamily::example1(0.75, 100);
  const auto mu0 = InitialDistribution::point_mass(100, 0);
  const SpeedFunction speed(0.6);
  const auto f = Observable::indicator(100, 0);
  const std::vector<Observable> one{f};
  const auto e1 = empirical_functionals(fam, mu0, one, speed, 300, 50, 8);
  const auto sums = simulate_sums(mu0, fam, f, 300, 50, 8);
  const double es = expected_Sn(mu0, fam, f, 300);
  for (std::size_t t = 0; t < 50; ++t) CHECK(e1[t][0] == doctest::Approx((sums[t] - es) / speed(300)));

  const std::vector<Observable> pair{f, f * -1.0};
  const auto e2 = empirical_functionals(fam, mu0, pair, speed, 300, 50, 8);
  for (const auto& v : e2) {
    CHECK(v[1] == -v[0]);
    CHECK(std::abs(v[0]) <= 2 * 300 * 1.0 / speed(300));
  }
}

TEST_CASE("martingale check") {
  SUBCASE("identical rows") {
    const auto fam = limit_family(60);
    const auto mu0 = InitialDistribution::point_mass(60, 0);
    const std::vector<Observable> fs{Observable::indicator(60, 0), Observable::capped_identity(60, 3)};
    const std::vector<double> z{1.0, 0.5};
    const std::vector<std::size_t> ns{1, 10, 100};
    const auto mc = martingale_check(fam, mu0, fs, z, ns, 200, 1);
    const auto g = linear_combination(fs, z);
    const double th = theta(stationary(fam.limit()).pi, fam.limit(), g);
    for (std::size_t i = 0; i < ns.size(); ++i) {
      CHECK(mc.drift_values[i] <= 1e-14);
      CHECK(mc.variance_values[i] == doctest::Approx(th).epsilon(1e-12));
    }
    CHECK(mc.identity_residual <= 1e-10);
  }
  SUBCASE("example 1") {
    const auto fam = KernelFamily::example1(0.75, 300);
    const auto mu0 = InitialDistribution::point_mass(300, 0);
    const std::vector<Observable> fs{Observable::indicator(300, 0)};
    const std::vector<double> z{1.0};
    const std::vector<std::size_t> ns{100, 1000, 10000};
    const auto a = martingale_check(fam, mu0, fs, z, ns, 300, 4, 1);
    const auto b = martingale_check(fam, mu0, fs, z, ns, 300, 4, 3);
    CHECK(a.drift_values == b.drift_values);
    CHECK(a.identity_residual <= 1e-10);
    const double th = theta(stationary(fam.limit()).pi, fam.limit(), fs[0]);
    CHECK(std::abs(a.variance_values.back() - th) <= 0.01);
  }
}
