#include "nhmc/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nhmc/errors.hpp"
#include "nhmc/parallel.hpp"

namespace nhmc {

namespace {

// Neumaier compensated sum.
struct CompensatedSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) carry += (sum - t) + v;
    else carry += (v - t) + sum;
    sum = t;
  }
  [[nodiscard]] double value() const { return sum + carry; }
};

void check_horizons(std::span<const std::size_t> horizons) {
  if (horizons.empty()) throw InvalidModel("need at least one horizon");
  if (horizons.front() == 0) throw InvalidModel("horizons start at n >= 1");
  for (std::size_t i = 1; i < horizons.size(); ++i)
    if (horizons[i] <= horizons[i - 1]) throw InvalidModel("horizons must be strictly increasing");
}

void check_sampling_inputs(const InitialDistribution& mu0, const KernelFamily& family,
                           std::span<const Observable> observables) {
  if (mu0.size() != family.size()) throw InvalidModel("initial distribution and family differ in N");
  if (mu0.tail_mass() > kRowSumTolerance)
    throw InvalidModel("sampling needs an initial distribution without tail mass");
  for (const auto& f : observables)
    if (f.size() != family.size()) throw InvalidModel("observable and family differ in N");
}

bool tail_is_live(const InitialDistribution& mu0, const KernelFamily& family) {
  if (mu0.tail_mass() > 0.0) return true;
  for (std::size_t b = 0; b < family.base_count(); ++b)
    if (family.base(b).kernel.max_tail_mass() > 0.0) return true;
  return false;
}

// Steps 1..n whose kernels can differ: all of them for the example
// families, the table plus one limit step for tables, one for constants.
std::vector<std::size_t> distinct_steps(const KernelFamily& family, std::size_t n) {
  std::vector<std::size_t> ks;
  switch (family.kind()) {
    case KernelFamily::Kind::Constant:
      ks.push_back(1);
      break;
    case KernelFamily::Kind::Table: {
      const std::size_t last = std::min(n, family.base_count());
      for (std::size_t k = 1; k <= last; ++k) ks.push_back(k);
      break;
    }
    default:
      for (std::size_t k = 1; k <= n; ++k) ks.push_back(k);
  }
  return ks;
}

// Per-base, per-row mass on each block (tail as block `nb`).
struct BlockMasses {
  std::size_t n_states = 0;
  std::size_t nb = 0;
  std::vector<std::vector<double>> per_base;  // [base][row * (nb + 1) + block]

  void build(const KernelFamily& family, std::span<const std::size_t> block, std::size_t n_blocks) {
    n_states = family.size();
    nb = n_blocks;
    per_base.assign(family.base_count(), {});
    for (std::size_t b = 0; b < family.base_count(); ++b) {
      const auto& base = family.base(b);
      const std::size_t rows = base.rank_one ? 1 : n_states;
      auto& out = per_base[b];
      out.assign(rows * (nb + 1), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const auto r = base.kernel.row(i);
        for (std::size_t j = 0; j < n_states; ++j) out[i * (nb + 1) + block[j]] += r[j];
        out[i * (nb + 1) + nb] += base.kernel.tail_mass(i);
      }
    }
  }

  void row(const StepKernel& step, std::span<const std::size_t> block, std::size_t i, double* out) const {
    const auto& base = step.base();
    const auto& src = per_base[base.index];
    const std::size_t r = base.rank_one ? 0 : i;
    const RowView view = step.row(i);
    for (std::size_t c = 0; c <= nb; ++c) out[c] = view.scale * src[r * (nb + 1) + c];
    for (const Correction& c : view.corrections()) out[block[c.col]] += c.value;
  }
};

constexpr double kLumpTolerance = 1e-13;

}  // namespace

SpeedFunction::SpeedFunction(double beta) : beta_(beta) {
  if (!(beta > 0.5 && beta < 1.0)) throw InvalidModel("speed exponent must satisfy 1/2 < beta < 1");
}

double SpeedFunction::operator()(double n) const { return std::pow(n, beta_); }

double SumDistribution::total_mass() const { return std::accumulate(pmf.begin(), pmf.end(), 0.0); }

double SumDistribution::upper_tail(double t) const {
  const double s0 = std::ceil(t - 1e-9 * std::max(1.0, std::abs(t)));
  double total = 0.0;
  for (std::size_t i = pmf.size(); i-- > 0;) {
    if (static_cast<double>(support_offset + static_cast<long long>(i)) < s0) break;
    total += pmf[i];
  }
  return total;
}

double SumDistribution::lower_tail(double t) const {
  const double s0 = std::floor(t + 1e-9 * std::max(1.0, std::abs(t)));
  double total = 0.0;
  for (std::size_t i = 0; i < pmf.size(); ++i) {
    if (static_cast<double>(support_offset + static_cast<long long>(i)) > s0) break;
    total += pmf[i];
  }
  return total;
}

std::vector<std::size_t> lumpable_partition(const KernelFamily& family, const Observable& f, std::size_t n) {
  const std::size_t n_states = family.size();
  if (f.size() != n_states) throw InvalidModel("observable and family differ in N");
  std::vector<std::size_t> block(n_states);
  std::size_t nb = 0;
  {
    std::vector<double> seen;
    for (std::size_t i = 0; i < n_states; ++i) {
      auto it = std::find(seen.begin(), seen.end(), f(i));
      if (it == seen.end()) {
        block[i] = seen.size();
        seen.push_back(f(i));
      } else {
        block[i] = static_cast<std::size_t>(it - seen.begin());
      }
    }
    nb = seen.size();
  }

  const auto ks = distinct_steps(family, n);
  BlockMasses masses;
  std::vector<double> row_mass;
  std::vector<std::vector<std::size_t>> members;
  bool changed = true;
  while (changed) {
    changed = false;
    masses.build(family, block, nb);
    members.assign(nb, {});
    for (std::size_t i = 0; i < n_states; ++i) members[block[i]].push_back(i);
    const std::size_t w = nb + 1;
    row_mass.assign(n_states * w, 0.0);
    for (std::size_t k : ks) {
      const StepKernel step = family.step(k);
      for (std::size_t i = 0; i < n_states; ++i) masses.row(step, block, i, &row_mass[i * w]);
      auto differs = [&](std::size_t a, std::size_t b) {
        for (std::size_t c = 0; c < w; ++c)
          if (std::abs(row_mass[a * w + c] - row_mass[b * w + c]) > kLumpTolerance) return true;
        return false;
      };
      for (std::size_t b = 0; b < nb && !changed; ++b) {
        auto& mem = members[b];
        bool uniform = true;
        for (std::size_t x = 1; x < mem.size() && uniform; ++x) uniform = !differs(mem[0], mem[x]);
        if (uniform) continue;
        std::vector<std::size_t> sorted = mem;
        std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t c) {
          return std::lexicographical_compare(&row_mass[a * w], &row_mass[a * w + w], &row_mass[c * w],
                                              &row_mass[c * w + w]);
        });
        std::size_t leader = sorted[0];
        std::size_t label = b;
        for (std::size_t x = 0; x < sorted.size(); ++x) {
          if (differs(leader, sorted[x])) {
            leader = sorted[x];
            label = nb++;
          }
          block[sorted[x]] = label;
        }
        changed = true;
      }
      if (changed) break;
    }
  }
  // Renumber blocks by first state so the labels are canonical.
  std::vector<std::size_t> relabel(nb, static_cast<std::size_t>(-1));
  std::size_t next = 0;
  for (std::size_t i = 0; i < n_states; ++i) {
    if (relabel[block[i]] == static_cast<std::size_t>(-1)) relabel[block[i]] = next++;
    block[i] = relabel[block[i]];
  }
  return block;
}

std::vector<SumDistribution> exact_sum_distributions(const InitialDistribution& mu0, const KernelFamily& family,
                                                     const Observable& f, std::span<const std::size_t> horizons,
                                                     const DpOptions& options) {
  check_horizons(horizons);
  if (mu0.size() != family.size()) throw InvalidModel("initial distribution and family differ in N");
  if (f.size() != family.size()) throw InvalidModel("observable and family differ in N");
  const bool tail_live = tail_is_live(mu0, family);
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f(i) != std::round(f(i))) throw InvalidModel("exact sum distribution needs an integer-valued observable");
  if (tail_live && f.tail_value() != std::round(f.tail_value()))
    throw InvalidModel("exact sum distribution needs an integer tail value when tail mass is present");

  const std::size_t n_max = horizons.back();
  const std::size_t n_states = family.size();
  const std::vector<std::size_t> block = lumpable_partition(family, f, n_max);
  const std::size_t nb = *std::max_element(block.begin(), block.end()) + 1;
  // Quotient chain on nb blocks plus an absorbing tail block.
  const std::size_t nq = nb + (tail_live ? 1 : 0);
  std::vector<std::size_t> rep(nb, n_states);
  for (std::size_t i = 0; i < n_states; ++i)
    if (rep[block[i]] == n_states) rep[block[i]] = i;
  std::vector<long long> value(nq);
  for (std::size_t b = 0; b < nb; ++b) value[b] = std::llround(f(rep[b]));
  if (tail_live) value[nb] = std::llround(f.tail_value());
  const long long vmin = *std::min_element(value.begin(), value.end());
  const long long vmax = *std::max_element(value.begin(), value.end());

  BlockMasses masses;
  masses.build(family, block, nb);

  long long lo = 0;
  std::size_t width = 1;
  std::vector<double> cur(nq, 0.0);
  for (std::size_t i = 0; i < n_states; ++i) cur[block[i]] += mu0.probs()[i];
  if (tail_live) cur[nb] += mu0.tail_mass();

  std::vector<double> q(nq * nq);
  std::vector<double> row(nb + 1);
  std::vector<SumDistribution> out;
  double processed = 0.0;
  std::size_t next_h = 0;
  for (std::size_t k = 1; k <= n_max; ++k) {
    const StepKernel step = family.step(k);
    std::fill(q.begin(), q.end(), 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      masses.row(step, block, rep[b], row.data());
      for (std::size_t c = 0; c < nb; ++c) q[b * nq + c] = row[c];
      if (tail_live) q[b * nq + nb] = row[nb];
    }
    if (tail_live) q[nb * nq + nb] = 1.0;

    processed += static_cast<double>(nq * nq) * static_cast<double>(width);
    if (processed > options.max_entries)
      throw BudgetExceeded("exact sum distribution exceeded its budget of " +
                           std::to_string(static_cast<long long>(options.max_entries)) +
                           " processed entries at step " + std::to_string(k));

    const std::size_t new_width = width + static_cast<std::size_t>(vmax - vmin);
    std::vector<double> next(nq * new_width, 0.0);
    for (std::size_t b = 0; b < nq; ++b) {
      const double* src = &cur[b * width];
      for (std::size_t c = 0; c < nq; ++c) {
        const double w = q[b * nq + c];
        if (w == 0.0) continue;
        double* dst = &next[c * new_width + static_cast<std::size_t>(value[c] - vmin)];
        for (std::size_t s = 0; s < width; ++s) dst[s] += w * src[s];
      }
    }
    lo += vmin;

    // Trim negligible mass at both ends of the window.
    auto column_mass = [&](std::size_t s) {
      double m = 0.0;
      for (std::size_t c = 0; c < nq; ++c) m += next[c * new_width + s];
      return m;
    };
    std::size_t first = 0;
    std::size_t last = new_width;
    while (last - first > 1 && column_mass(first) < options.prune_below) ++first;
    while (last - first > 1 && column_mass(last - 1) < options.prune_below) --last;
    width = last - first;
    lo += static_cast<long long>(first);
    cur.assign(nq * width, 0.0);
    for (std::size_t c = 0; c < nq; ++c)
      std::copy(next.begin() + static_cast<std::ptrdiff_t>(c * new_width + first),
                next.begin() + static_cast<std::ptrdiff_t>(c * new_width + last), cur.begin() + static_cast<std::ptrdiff_t>(c * width));

    if (k == horizons[next_h]) {
      SumDistribution d;
      d.n = k;
      d.support_offset = lo;
      d.pmf.assign(width, 0.0);
      for (std::size_t c = 0; c < nq; ++c)
        for (std::size_t s = 0; s < width; ++s) d.pmf[s] += cur[c * width + s];
      double mean = 0.0;
      for (std::size_t s = 0; s < width; ++s) mean += static_cast<double>(lo + static_cast<long long>(s)) * d.pmf[s];
      d.mean = mean / d.total_mass();
      out.push_back(std::move(d));
      ++next_h;
    }
  }
  return out;
}

SumDistribution exact_sum_distribution(const InitialDistribution& mu0, const KernelFamily& family,
                                       const Observable& f, std::size_t n, const DpOptions& options) {
  const std::size_t h[1] = {n};
  return std::move(exact_sum_distributions(mu0, family, f, h, options).front());
}

// ---------------------------------------------------------------------------
// Monte Carlo

std::vector<double> SumSamples::column(std::size_t h, std::size_t l) const {
  std::vector<double> out(trials);
  for (std::size_t t = 0; t < trials; ++t) out[t] = at(h, t, l);
  return out;
}

SumSamples simulate_partial_sums(const InitialDistribution& mu0, const KernelFamily& family,
                                 std::span<const Observable> observables, std::span<const std::size_t> horizons,
                                 std::size_t trials, std::uint64_t base_seed, unsigned workers) {
  check_horizons(horizons);
  if (trials == 0) throw InvalidModel("need at least one trial");
  if (observables.empty()) throw InvalidModel("need at least one observable");
  check_sampling_inputs(mu0, family, observables);
  const std::size_t m = observables.size();
  const std::size_t n_max = horizons.back();
  const std::vector<StepKernel> steps = family.steps(1, n_max);

  SumSamples out;
  out.horizons.assign(horizons.begin(), horizons.end());
  out.trials = trials;
  out.m = m;
  out.values.assign(horizons.size() * trials * m, 0.0);
  parallel_for(trials, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> sums(m);
    for (std::size_t t = begin; t < end; ++t) {
      Rng rng = make_rng(base_seed + t);
      std::size_t x = mu0.sample(uniform01(rng));
      std::fill(sums.begin(), sums.end(), 0.0);
      std::size_t h = 0;
      for (std::size_t k = 1; k <= n_max; ++k) {
        x = steps[k - 1].row(x).sample(uniform01(rng));
        for (std::size_t l = 0; l < m; ++l) sums[l] += observables[l](x);
        if (k == horizons[h]) {
          for (std::size_t l = 0; l < m; ++l) out.values[(h * trials + t) * m + l] = sums[l];
          ++h;
        }
      }
    }
  });
  return out;
}

std::vector<double> simulate_sums(const InitialDistribution& mu0, const KernelFamily& family, const Observable& f,
                                  std::size_t n, std::size_t trials, std::uint64_t base_seed, unsigned workers) {
  const std::size_t h[1] = {n};
  const Observable fs[1] = {f};
  return simulate_partial_sums(mu0, family, fs, h, trials, base_seed, workers).column(0, 0);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double ks_statistic_normal(std::vector<double> standardized) {
  std::sort(standardized.begin(), standardized.end());
  const double n = static_cast<double>(standardized.size());
  double d = 0.0;
  for (std::size_t i = 0; i < standardized.size(); ++i) {
    const double phi = normal_cdf(standardized[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - phi, phi - static_cast<double>(i) / n});
  }
  return d;
}

CltDiagnostic clt_diagnostic(std::span<const double> samples, double expected_sum, double theta_value,
                             std::size_t n) {
  if (!(theta_value > 0.0))
    throw HypothesisViolation("the CLT standardization needs theta(f) > 0");
  if (samples.size() < 1000) throw InvalidModel("clt diagnostic needs at least 1000 samples");
  if (n == 0) throw InvalidModel("clt diagnostic needs n >= 1");
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  if (*lo == *hi) throw InvalidModel("degenerate samples: every S_n is equal");
  const double nd = static_cast<double>(n);
  const double scale = std::sqrt(nd * theta_value);
  std::vector<double> z(samples.size());
  double second = 0.0;
  double first = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double c = samples[i] - expected_sum;
    z[i] = c / scale;
    first += z[i];
    second += c * c / nd;
  }
  CltDiagnostic out;
  out.samples = samples.size();
  out.variance_ratio = second / static_cast<double>(samples.size()) / theta_value;
  out.sample_mean_offset = first / static_cast<double>(samples.size());
  out.ks_statistic = ks_statistic_normal(std::move(z));
  return out;
}

// ---------------------------------------------------------------------------
// Moderate deviations

std::string to_string(MdpMethod method) {
  switch (method) {
    case MdpMethod::ExactDP:
      return "exact_dp";
    case MdpMethod::MonteCarlo:
      return "monte_carlo";
    case MdpMethod::Auto:
      return "auto";
  }
  return "unknown";
}

MdpMethod mdp_method_from_string(const std::string& name) {
  if (name == "exact_dp" || name == "exact") return MdpMethod::ExactDP;
  if (name == "monte_carlo" || name == "mc") return MdpMethod::MonteCarlo;
  if (name == "auto") return MdpMethod::Auto;
  throw InvalidModel("unknown mdp method '" + name + "'");
}

namespace {

std::vector<double> expected_partial_sums(const InitialDistribution& mu0, const KernelFamily& family,
                                          const Observable& f, std::size_t n) {
  const auto ev = expected_values(mu0, family, f, n);
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) prefix[k + 1] = prefix[k] + ev[k];
  return prefix;
}

MdpEstimate make_estimate(std::size_t n, double x, double probability, double theta_value,
                          const SpeedFunction& speed, MdpMethod method) {
  MdpEstimate e;
  e.n = n;
  e.x = x;
  e.method = method;
  e.probability = probability;
  const double a = speed(static_cast<double>(n));
  const double factor = static_cast<double>(n) / (a * a);
  e.log_prob = probability > 0.0 ? std::min(0.0, std::log(probability)) : -std::numeric_limits<double>::infinity();
  e.scaled = factor * e.log_prob;
  e.target = x == 0.0 ? 0.0 : -x * x / (2.0 * theta_value);
  e.zero_hits = probability <= 0.0;
  return e;
}

}  // namespace

std::vector<MdpEstimate> mdp_diagnostic(const KernelFamily& family, const InitialDistribution& mu0,
                                        const Observable& f, const SpeedFunction& speed,
                                        std::span<const double> x_grid, std::span<const std::size_t> n_grid,
                                        double theta_value, const MdpOptions& options) {
  if (!(theta_value > 0.0))
    throw HypothesisViolation("the moderate deviation rate needs theta(f) > 0");
  check_horizons(n_grid);
  if (x_grid.empty()) throw InvalidModel("mdp diagnostic needs a nonempty x grid");
  const auto es = expected_partial_sums(mu0, family, f, n_grid.back());

  MdpMethod method = options.method;
  std::vector<SumDistribution> exact;
  if (method == MdpMethod::ExactDP || method == MdpMethod::Auto) {
    if (method == MdpMethod::Auto && !f.is_integer_valued()) {
      method = MdpMethod::MonteCarlo;
    } else {
      try {
        exact = exact_sum_distributions(mu0, family, f, n_grid, options.dp);
        method = MdpMethod::ExactDP;
      } catch (const BudgetExceeded&) {
        if (method == MdpMethod::ExactDP) throw;
        method = MdpMethod::MonteCarlo;
      }
    }
  }

  std::vector<MdpEstimate> out;
  if (method == MdpMethod::ExactDP) {
    for (std::size_t h = 0; h < n_grid.size(); ++h) {
      const std::size_t n = n_grid[h];
      const double a = speed(static_cast<double>(n));
      for (double x : x_grid) {
        const double t = es[n] + x * a;
        const double p = x >= 0.0 ? exact[h].upper_tail(t) : exact[h].lower_tail(t);
        out.push_back(make_estimate(n, x, p, theta_value, speed, MdpMethod::ExactDP));
      }
    }
    return out;
  }

  std::size_t trials = options.trials;
  if (trials == 0) {
    // Gaussian-scale guess of the smallest tail, aiming at ~100 hits.
    double p_min = 1.0;
    for (std::size_t n : n_grid) {
      const double a = speed(static_cast<double>(n));
      for (double x : x_grid) {
        const double z = std::abs(x) * a / std::sqrt(static_cast<double>(n) * theta_value);
        p_min = std::min(p_min, 0.5 * std::erfc(z / std::sqrt(2.0)));
      }
    }
    const double wanted = std::ceil(100.0 / std::max(p_min, 1e-300));
    trials = static_cast<std::size_t>(std::clamp(wanted, 1000.0, static_cast<double>(options.max_trials)));
  }
  const Observable fs[1] = {f};
  const SumSamples samples = simulate_partial_sums(mu0, family, fs, n_grid, trials, options.base_seed, options.workers);
  for (std::size_t h = 0; h < n_grid.size(); ++h) {
    const std::size_t n = n_grid[h];
    const double a = speed(static_cast<double>(n));
    for (double x : x_grid) {
      const double t = es[n] + x * a;
      const double eps = 1e-9 * std::max(1.0, std::abs(t));
      std::size_t hits = 0;
      for (std::size_t tr = 0; tr < trials; ++tr) {
        const double s = samples.at(h, tr, 0);
        hits += x >= 0.0 ? (s >= t - eps) : (s <= t + eps);
      }
      const double p = static_cast<double>(hits) / static_cast<double>(trials);
      MdpEstimate e = make_estimate(n, x, p, theta_value, speed, MdpMethod::MonteCarlo);
      e.trials = trials;
      if (hits > 0) {
        const double se_p = std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
        e.std_error = static_cast<double>(n) / (a * a) * se_p / p;
      }
      out.push_back(e);
    }
  }
  return out;
}

std::vector<std::vector<double>> empirical_functionals(const KernelFamily& family, const InitialDistribution& mu0,
                                                       std::span<const Observable> observables,
                                                       const SpeedFunction& speed, std::size_t n,
                                                       std::size_t trials, std::uint64_t base_seed,
                                                       unsigned workers) {
  if (observables.empty()) throw InvalidModel("need at least one observable");
  const std::size_t m = observables.size();
  std::vector<double> es(m);
  for (std::size_t l = 0; l < m; ++l) es[l] = expected_Sn(mu0, family, observables[l], n);
  const std::size_t h[1] = {n};
  const SumSamples samples = simulate_partial_sums(mu0, family, observables, h, trials, base_seed, workers);
  const double a = speed(static_cast<double>(n));
  std::vector<std::vector<double>> out(trials, std::vector<double>(m));
  for (std::size_t t = 0; t < trials; ++t)
    for (std::size_t l = 0; l < m; ++l) out[t][l] = (samples.at(0, t, l) - es[l]) / a;
  return out;
}

// ---------------------------------------------------------------------------
// Martingale decomposition

ConditionalMean::ConditionalMean(const KernelFamily& family, const Observable& g) : g_(&g) {
  if (g.size() != family.size()) throw InvalidModel("observable and family differ in N");
  const std::size_t n = family.size();
  base_image_.resize(family.base_count());
  for (std::size_t b = 0; b < family.base_count(); ++b) {
    const auto& base = family.base(b);
    auto& img = base_image_[b];
    img.resize(n);
    const std::size_t rows = base.rank_one ? 1 : n;
    for (std::size_t i = 0; i < rows; ++i) {
      const auto r = base.kernel.row(i);
      double s = base.kernel.tail_mass(i) * g.tail_value();
      for (std::size_t j = 0; j < n; ++j) s += r[j] * g(j);
      img[i] = s;
    }
    if (base.rank_one) std::fill(img.begin() + 1, img.end(), img[0]);
  }
}

double ConditionalMean::operator()(const StepKernel& step, std::size_t i) const {
  const RowView r = step.row(i);
  double v = r.scale * base_image_[step.base().index][i];
  for (const Correction& c : r.corrections()) v += c.value * (*g_)(c.col);
  return v;
}

MartingaleCheck martingale_check(const KernelFamily& family, const InitialDistribution& mu0,
                                 std::span<const Observable> observables, std::span<const double> z,
                                 std::span<const std::size_t> n_grid, std::size_t trials,
                                 std::uint64_t base_seed, unsigned workers) {
  check_horizons(n_grid);
  if (observables.size() != z.size()) throw InvalidModel("z must have one weight per observable");
  if (trials == 0) throw InvalidModel("need at least one trial");
  check_sampling_inputs(mu0, family, observables);
  const Observable g = linear_combination(observables, z);
  std::vector<double> sq(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) sq[i] = g(i) * g(i);
  const Observable g2(std::move(sq), g.tail_value() * g.tail_value());
  const std::size_t n_max = n_grid.back();

  // Exact E g(X_k) and E D_k^2 by propagation.
  std::vector<double> eg(n_max + 1, 0.0);
  std::vector<double> cond_var(n_max + 1, 0.0);
  {
    Propagator prop(mu0, family);
    for (std::size_t k = 1; k <= n_max; ++k) {
      const StepKernel step = family.step(k);
      const auto pg = step.apply(g);
      const auto pg2 = step.apply(g2);
      const auto& mu = prop.current().probs;
      double v = 0.0;
      for (std::size_t i = 0; i < mu.size(); ++i) v += mu[i] * (pg2[i] - pg[i] * pg[i]);
      cond_var[k] = v;
      prop.advance();
      eg[k] = prop.current().expectation(g);
    }
  }

  MartingaleCheck out;
  out.n_grid.assign(n_grid.begin(), n_grid.end());
  double acc = 0.0;
  std::size_t h = 0;
  for (std::size_t k = 1; k <= n_max; ++k) {
    acc += cond_var[k];
    if (k == n_grid[h]) {
      out.variance_values.push_back(acc / static_cast<double>(k));
      ++h;
    }
  }

  const std::vector<StepKernel> steps = family.steps(1, n_max);
  const ConditionalMean pg(family, g);
  const std::size_t nh = n_grid.size();
  std::vector<double> drift(trials * nh);
  std::vector<double> residual(trials, 0.0);
  parallel_for(trials, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      Rng rng = make_rng(base_seed + t);
      std::size_t x = mu0.sample(uniform01(rng));
      CompensatedSum centered;  // sum g(X_k) - E g(X_k)
      CompensatedSum mart;      // W_n
      CompensatedSum comp;      // sum (P_k g)(X_{k-1}) - E g(X_k)
      std::size_t hi = 0;
      for (std::size_t k = 1; k <= n_max; ++k) {
        const double cm = pg(steps[k - 1], x);
        x = steps[k - 1].row(x).sample(uniform01(rng));
        const double gx = g(x);
        centered.add(gx - eg[k]);
        mart.add(gx - cm);
        comp.add(cm - eg[k]);
        if (k == n_grid[hi]) {
          drift[t * nh + hi] = std::abs(comp.value()) / std::sqrt(static_cast<double>(k));
          residual[t] = std::max(residual[t], std::abs(centered.value() - mart.value() - comp.value()));
          ++hi;
        }
      }
    }
  });
  for (std::size_t hh = 0; hh < nh; ++hh) {
    double s = 0.0;
    for (std::size_t t = 0; t < trials; ++t) s += drift[t * nh + hh];
    out.drift_values.push_back(s / static_cast<double>(trials));
  }
  for (double r : residual) out.identity_residual = std::max(out.identity_residual, r);
  return out;
}

}  // namespace nhmc
