#pragma once
// Truncated countable-state kernels, time-varying kernel families, exact
// forward propagation and trajectory sampling.
//
// States are 0-based throughout the C++ API: state s here is state s+1 of the
// countable space {1, 2, ...}. Configuration files use 1-based states.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nhmc/matrix.hpp"

namespace nhmc {

inline constexpr double kEntryTolerance = 1e-12;
inline constexpr double kRowSumTolerance = 1e-12;
inline constexpr double kMassTolerance = 1e-10;

enum class TailPolicy { LumpToLast, Renormalize };

std::string to_string(TailPolicy policy);
TailPolicy tail_policy_from_string(const std::string& name);

// One step of a chain restricted to the first N states. Whatever a row does
// not place on the retained states is recorded as tail mass.
class TruncatedKernel {
 public:
  // Entries within kEntryTolerance of [0, 1] are clamped; anything further
  // out, or a row summing above one, throws InvalidModel.
  explicit TruncatedKernel(Matrix rows);
  // Same, with a looser bound on how far a row sum may exceed one (used for
  // long kernel products).
  TruncatedKernel(Matrix rows, double row_tolerance);

  static TruncatedKernel identity(std::size_t n);
  static TruncatedKernel identical_rows(std::span<const double> row);

  [[nodiscard]] std::size_t size() const { return rows_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return rows_(i, j); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return rows_.row(i); }
  [[nodiscard]] double tail_mass(std::size_t i) const { return tail_[i]; }
  [[nodiscard]] std::span<const double> tail_masses() const { return tail_; }
  [[nodiscard]] double max_tail_mass() const;
  [[nodiscard]] const Matrix& matrix() const { return rows_; }

  // Moves tail mass onto the retained states: added to the last column
  // (LumpToLast) or spread by rescaling the row (Renormalize).
  [[nodiscard]] TruncatedKernel resolve_tail(TailPolicy policy) const;

  // True when every row equals row 0 bit for bit.
  [[nodiscard]] bool has_identical_rows() const;

 private:
  Matrix rows_;
  std::vector<double> tail_;
};

class InitialDistribution {
 public:
  InitialDistribution(std::vector<double> probs, double tail_mass = 0.0);

  static InitialDistribution point_mass(std::size_t n_states, std::size_t state);
  static InitialDistribution uniform(std::size_t n_states);

  [[nodiscard]] std::size_t size() const { return probs_.size(); }
  [[nodiscard]] std::span<const double> probs() const { return probs_; }
  [[nodiscard]] double tail_mass() const { return tail_mass_; }

  // Inverse-CDF draw over the retained states.
  [[nodiscard]] std::size_t sample(double u) const;

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
  double tail_mass_;
};

// Bounded real function on the states; tail_value is used for mass that
// sits beyond the retained states.
class Observable {
 public:
  Observable(std::vector<double> values, double tail_value);

  static Observable constant(std::size_t n_states, double c);
  static Observable indicator(std::size_t n_states, std::size_t state);
  // f(s) = min(s + 1, cap): the state label capped at `cap`.
  static Observable capped_identity(std::size_t n_states, double cap);

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  double operator()(std::size_t state) const { return values_[state]; }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] double tail_value() const { return tail_value_; }
  [[nodiscard]] double bound() const { return bound_; }
  [[nodiscard]] bool is_integer_valued() const;

  [[nodiscard]] Observable operator+(double c) const;
  [[nodiscard]] Observable operator*(double a) const;

 private:
  std::vector<double> values_;
  double tail_value_;
  double bound_;
};

Observable linear_combination(std::span<const Observable> observables,
                              std::span<const double> weights);

struct DistributionVector {
  std::vector<double> probs;
  double tail_mass = 0.0;
  std::size_t step = 0;

  [[nodiscard]] double total_mass() const;
  [[nodiscard]] double expectation(const Observable& f) const;
};

namespace detail {

struct DenseBase {
  TruncatedKernel kernel;
  std::vector<double> cdf;       // N*N, or a single row when rank_one
  std::vector<double> row_sums;  // sum over retained columns
  bool rank_one = false;
  std::size_t index = 0;         // position in the owning family's base list
};

// Band perturbation of the example families: row i moves coef[i] * amplitude
// from (i, i) to (i, i + 1).
struct Band {
  std::vector<double> coef;
  double norm = 1.0;        // finite row sum under Renormalize, else 1
  double last_raw = 0.0;    // un-normalized coefficient of the last row
  TailPolicy policy = TailPolicy::LumpToLast;
};

}  // namespace detail

struct Correction {
  std::size_t col = 0;
  double value = 0.0;
};

// Row i of one step kernel: scale * base_row + sparse corrections.
class RowView {
 public:
  std::span<const double> base;
  std::span<const double> base_cdf;
  double scale = 1.0;
  double base_tail = 0.0;
  std::array<Correction, 2> corr{};
  std::size_t n_corr = 0;

  [[nodiscard]] double at(std::size_t j) const {
    double v = scale * base[j];
    for (std::size_t c = 0; c < n_corr; ++c)
      if (corr[c].col == j) v += corr[c].value;
    return v;
  }
  [[nodiscard]] double cdf(std::size_t j) const {
    double v = scale * base_cdf[j];
    for (std::size_t c = 0; c < n_corr; ++c)
      if (corr[c].col <= j) v += corr[c].value;
    return v;
  }
  [[nodiscard]] double tail() const { return scale * base_tail; }
  [[nodiscard]] std::span<const Correction> corrections() const { return {corr.data(), n_corr}; }

  // Smallest j with cdf(j) > u; the last state when u is beyond the row mass.
  [[nodiscard]] std::size_t sample(double u) const {
    std::size_t lo = 0;
    std::size_t hi = base.size() - 1;
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (cdf(mid) > u) hi = mid;
      else lo = mid + 1;
    }
    return lo;
  }
};

// Lightweight view of P_k. Holds pointers into the family; valid only while
// the KernelFamily it came from is alive.
class StepKernel {
 public:
  StepKernel(const detail::DenseBase* base, const detail::Band* band,
             double amplitude, std::size_t step)
      : base_(base), band_(band), amplitude_(amplitude), step_(step) {}

  [[nodiscard]] std::size_t size() const { return base_->kernel.size(); }
  [[nodiscard]] std::size_t step() const { return step_; }
  [[nodiscard]] double amplitude() const { return amplitude_; }
  [[nodiscard]] const detail::DenseBase& base() const { return *base_; }
  [[nodiscard]] bool perturbed() const { return band_ != nullptr && amplitude_ != 0.0; }

  [[nodiscard]] RowView row(std::size_t i) const {
    RowView r;
    const std::size_t n = size();
    r.base = base_->kernel.row(i);
    r.base_cdf = base_->rank_one ? std::span<const double>(base_->cdf)
                                 : std::span<const double>(base_->cdf).subspan(i * n, n);
    r.base_tail = base_->kernel.tail_mass(i);
    if (!perturbed()) return r;
    if (i + 1 < n) {
      const double eps = band_->coef[i] * amplitude_;
      r.corr[0] = {i, -eps};
      r.corr[1] = {i + 1, eps};
      r.n_corr = 2;
    } else if (band_->policy == TailPolicy::Renormalize) {
      // Last row loses its (N, N+1) entry to the truncation and is rescaled.
      const double eps = band_->last_raw * amplitude_;
      const double denom = band_->norm - eps;
      r.scale = band_->norm / denom;
      r.corr[0] = {i, -eps / denom};
      r.n_corr = 1;
    }
    return r;
  }

  [[nodiscard]] double row_scale(std::size_t i) const {
    if (!perturbed() || i + 1 < size() || band_->policy != TailPolicy::Renormalize) return 1.0;
    return band_->norm / (band_->norm - band_->last_raw * amplitude_);
  }

  double operator()(std::size_t i, std::size_t j) const { return row(i).at(j); }
  [[nodiscard]] double tail_mass(std::size_t i) const { return row(i).tail(); }

  // mu * P_k over the retained states; mass routed to the tail is returned
  // through `tail_out` when non-null.
  [[nodiscard]] std::vector<double> left_multiply(std::span<const double> mu,
                                                  double* tail_out = nullptr) const;
  // A * P_k.
  [[nodiscard]] Matrix right_multiply(const Matrix& a) const;
  // (P_k f)(i) for every i, tail included.
  [[nodiscard]] std::vector<double> apply(const Observable& f) const;

  [[nodiscard]] TruncatedKernel dense() const;

 private:
  const detail::DenseBase* base_;
  const detail::Band* band_;
  double amplitude_;
  std::size_t step_;
};

class KernelFamily {
 public:
  enum class Kind { Constant, Example1, Example2, Table };

  // The tail policy is applied to P (and every table entry) up front, so all
  // kernels of a family carry zero tail mass.
  static KernelFamily constant(const TruncatedKernel& kernel,
                               TailPolicy policy = TailPolicy::LumpToLast);
  // p(i, j) = 6 / (pi^2 j^2); P_k moves 6 / (pi^2 i^2 k^alpha) from (i, i) to
  // (i, i + 1). Requires alpha > 1/2 and n_states >= 3.
  static KernelFamily example1(double alpha, std::size_t n_states,
                               TailPolicy policy = TailPolicy::LumpToLast);
  // p(i, j) = 90 / (pi^4 j^4); the moved mass is 90 (log k)^beta /
  // (pi^4 i^4 k^alpha). Requires alpha > 1/2, beta > 0 and
  // beta <= alpha * e so that p_k(i, i) stays nonnegative for every k.
  static KernelFamily example2(double alpha, double beta, std::size_t n_states,
                               TailPolicy policy = TailPolicy::LumpToLast);
  // P_k = kernels[k - 1] for k <= kernels.size(), P_k = limit afterwards.
  // Without an explicit limit the last table entry is used.
  static KernelFamily table(std::vector<TruncatedKernel> kernels,
                            std::optional<TruncatedKernel> limit,
                            TailPolicy policy = TailPolicy::LumpToLast);

  [[nodiscard]] Kind kind() const;
  [[nodiscard]] double alpha() const;
  [[nodiscard]] double beta() const;
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] TailPolicy tail_policy() const;

  [[nodiscard]] const TruncatedKernel& limit() const;
  [[nodiscard]] StepKernel limit_step() const;

  // P_k for k >= 1.
  [[nodiscard]] StepKernel step(std::size_t k) const;
  [[nodiscard]] std::vector<StepKernel> steps(std::size_t first, std::size_t last) const;
  [[nodiscard]] TruncatedKernel kernel_at(std::size_t k) const { return step(k).dense(); }

  // Largest per-row mass the tail policy had to place at step k (the mass the
  // untruncated kernel sends beyond state N).
  [[nodiscard]] double truncated_mass(std::size_t k) const;

  [[nodiscard]] std::size_t base_count() const;
  [[nodiscard]] const detail::DenseBase& base(std::size_t index) const;

  struct Impl;

 private:
  explicit KernelFamily(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<const Impl> impl_;
};

std::string to_string(KernelFamily::Kind kind);

TruncatedKernel make_example_kernel(KernelFamily::Kind kind, double alpha, double beta,
                                    std::size_t k, std::size_t n_states, TailPolicy policy);
TruncatedKernel make_limit_kernel(KernelFamily::Kind kind, double alpha, double beta,
                                  std::size_t n_states, TailPolicy policy);

// P_{m+1} P_{m+2} ... P_n.
TruncatedKernel kernel_product(const KernelFamily& family, std::size_t m, std::size_t n);

// Forward distributions mu^(k) = mu^(0) P_1 ... P_k, one vector-matrix product
// per step.
class Propagator {
 public:
  Propagator(const InitialDistribution& mu0, const KernelFamily& family);

  [[nodiscard]] const DistributionVector& current() const { return current_; }
  void advance();

 private:
  const KernelFamily* family_;
  DistributionVector current_;
};

DistributionVector propagate(const InitialDistribution& mu0, const KernelFamily& family,
                             std::size_t k);

// E(S_n) with S_n = f(X_1) + ... + f(X_n).
double expected_Sn(const InitialDistribution& mu0, const KernelFamily& family,
                   const Observable& f, std::size_t n);
// E(f(X_k)) for k = 1..n.
std::vector<double> expected_values(const InitialDistribution& mu0, const KernelFamily& family,
                                    const Observable& f, std::size_t n);

using Rng = std::mt19937_64;
// Per-trial generator; the seed is scrambled so neighbouring seeds give
// unrelated streams.
Rng make_rng(std::uint64_t seed);
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// X_0 ~ mu0, X_k ~ row X_{k-1} of P_k. Returns n + 1 states.
std::vector<std::size_t> sample_trajectory(std::uint64_t seed, const InitialDistribution& mu0,
                                           const KernelFamily& family, std::size_t n);

}  // namespace nhmc
