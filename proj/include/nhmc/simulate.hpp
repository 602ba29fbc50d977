#pragma once
// Exact law of S_n for integer-valued observables, seeded Monte Carlo over
// trajectories, and the CLT / moderate-deviation / martingale diagnostics.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nhmc/chain_core.hpp"

namespace nhmc {

// a(n) = n^beta with 1/2 < beta < 1.
class SpeedFunction {
 public:
  explicit SpeedFunction(double beta);
  [[nodiscard]] double beta() const { return beta_; }
  double operator()(double n) const;

 private:
  double beta_;
};

struct SumDistribution {
  std::size_t n = 0;
  long long support_offset = 0;  // pmf[0] is P(S_n = support_offset)
  std::vector<double> pmf;
  double mean = 0.0;

  [[nodiscard]] double total_mass() const;
  // P(S_n >= t) and P(S_n <= t) for real t; the threshold is nudged by a
  // relative 1e-9 so integer t lands on the inclusive side.
  [[nodiscard]] double upper_tail(double t) const;
  [[nodiscard]] double lower_tail(double t) const;
};

struct DpOptions {
  // Budget on processed DP entries (block pairs times sum values, over all
  // steps).
  double max_entries = 2e9;
  // Sum values whose mass drops below this at the window edges are dropped.
  double prune_below = 1e-300;
};

// Groups states into blocks with equal f value such that, at every step
// 1..n, all rows of a block put the same mass on each block. The chain of
// block labels is then Markov with the same law of S_n. Returns block index
// per state.
std::vector<std::size_t> lumpable_partition(const KernelFamily& family, const Observable& f, std::size_t n);

// Law of S_n at each horizon (strictly increasing), from one forward pass.
// Throws InvalidModel for non-integer f and BudgetExceeded past the budget.
std::vector<SumDistribution> exact_sum_distributions(const InitialDistribution& mu0, const KernelFamily& family,
                                                     const Observable& f, std::span<const std::size_t> horizons,
                                                     const DpOptions& options = {});
SumDistribution exact_sum_distribution(const InitialDistribution& mu0, const KernelFamily& family,
                                       const Observable& f, std::size_t n, const DpOptions& options = {});

// Monte Carlo sums; trial i uses seed base_seed + i, so results do not
// depend on the worker count.
struct SumSamples {
  std::vector<std::size_t> horizons;
  std::size_t trials = 0;
  std::size_t m = 0;
  std::vector<double> values;  // [horizon][trial][observable]

  [[nodiscard]] double at(std::size_t h, std::size_t trial, std::size_t l) const {
    return values[(h * trials + trial) * m + l];
  }
  // Sums of one observable at one horizon across trials.
  [[nodiscard]] std::vector<double> column(std::size_t h, std::size_t l) const;
};

SumSamples simulate_partial_sums(const InitialDistribution& mu0, const KernelFamily& family,
                                 std::span<const Observable> observables, std::span<const std::size_t> horizons,
                                 std::size_t trials, std::uint64_t base_seed, unsigned workers = 1);

std::vector<double> simulate_sums(const InitialDistribution& mu0, const KernelFamily& family, const Observable& f,
                                  std::size_t n, std::size_t trials, std::uint64_t base_seed,
                                  unsigned workers = 1);

struct CltDiagnostic {
  double ks_statistic = 0.0;
  double variance_ratio = 0.0;
  double sample_mean_offset = 0.0;  // mean of (S_n - E S_n) / sqrt(n theta)
  std::size_t samples = 0;
};

// Standardizes by the exact mean and sqrt(n theta). variance_ratio is
// mean((S_n - E S_n)^2 / n) / theta.
CltDiagnostic clt_diagnostic(std::span<const double> samples, double expected_sum, double theta_value,
                             std::size_t n);

// Standard normal CDF.
double normal_cdf(double z);
// sup_x |F_n(x) - Phi(x)|.
double ks_statistic_normal(std::vector<double> standardized);

enum class MdpMethod { ExactDP, MonteCarlo, Auto };
std::string to_string(MdpMethod method);
MdpMethod mdp_method_from_string(const std::string& name);

struct MdpEstimate {
  std::size_t n = 0;
  double x = 0.0;
  double probability = 0.0;
  double log_prob = 0.0;
  double scaled = 0.0;  // (n / a(n)^2) log P
  double target = 0.0;  // -x^2 / (2 theta)
  MdpMethod method = MdpMethod::ExactDP;
  std::optional<double> std_error;  // of `scaled`, Monte Carlo only
  bool zero_hits = false;
  std::size_t trials = 0;
};

struct MdpOptions {
  MdpMethod method = MdpMethod::Auto;
  DpOptions dp;
  // Monte Carlo trials; 0 picks enough for ~100 expected hits at the
  // smallest targeted tail, capped at max_trials.
  std::size_t trials = 0;
  std::size_t max_trials = 1'000'000;
  std::uint64_t base_seed = 1;
  unsigned workers = 1;
};

// For x >= 0 the event is {(S_n - E S_n)/a(n) >= x}, for x < 0 it is
// {(S_n - E S_n)/a(n) <= x}. theta is that of the family's limit kernel.
std::vector<MdpEstimate> mdp_diagnostic(const KernelFamily& family, const InitialDistribution& mu0,
                                        const Observable& f, const SpeedFunction& speed,
                                        std::span<const double> x_grid, std::span<const std::size_t> n_grid,
                                        double theta_value, const MdpOptions& options = {});

// (S_l - E S_l) / a(n) per trial and observable: [trial][observable].
std::vector<std::vector<double>> empirical_functionals(const KernelFamily& family, const InitialDistribution& mu0,
                                                       std::span<const Observable> observables,
                                                       const SpeedFunction& speed, std::size_t n,
                                                       std::size_t trials, std::uint64_t base_seed,
                                                       unsigned workers = 1);

// (P_k g)(i) in O(1) per query for a fixed g.
class ConditionalMean {
 public:
  ConditionalMean(const KernelFamily& family, const Observable& g);
  double operator()(const StepKernel& step, std::size_t i) const;

 private:
  const Observable* g_;
  std::vector<std::vector<double>> base_image_;  // per family base
};

struct MartingaleCheck {
  std::vector<std::size_t> n_grid;
  std::vector<double> drift_values;
  std::vector<double> variance_values;
  // max over paths and horizons of the decomposition residual.
  double identity_residual = 0.0;
};

MartingaleCheck martingale_check(const KernelFamily& family, const InitialDistribution& mu0,
                                 std::span<const Observable> observables, std::span<const double> z,
                                 std::span<const std::size_t> n_grid, std::size_t trials,
                                 std::uint64_t base_seed, unsigned workers = 1);

}  // namespace nhmc
