#include "nhmc/ergodicity.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "nhmc/errors.hpp"
#include "nhmc/parallel.hpp"

namespace nhmc {

std::string to_string(Condition condition) {
  switch (condition) {
    case Condition::Cesaro:
      return "cesaro";
    case Condition::AverageDiff:
      return "average_diff";
    case Condition::DeltaSum:
      return "delta_sum";
  }
  return "unknown";
}

Condition condition_from_string(const std::string& name) {
  if (name == "cesaro") return Condition::Cesaro;
  if (name == "average_diff") return Condition::AverageDiff;
  if (name == "delta_sum") return Condition::DeltaSum;
  throw InvalidModel("unknown condition '" + name + "'");
}

double sup_row_norm(const Matrix& a) {
  double best = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += std::abs(v);
    best = std::max(best, s);
  }
  return best;
}

double sup_row_norm(const TruncatedKernel& p) {
  double best = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double s = std::abs(p.tail_mass(i));
    for (double v : p.row(i)) s += std::abs(v);
    best = std::max(best, s);
  }
  return best;
}

double distance_to_limit(const StepKernel& step, const TruncatedKernel& limit) {
  const std::size_t n = step.size();
  if (limit.size() != n) throw InvalidModel("distance_to_limit: state counts differ");
  double best = 0.0;
  if (&step.base().kernel == &limit) {
    const auto& base = step.base();
    for (std::size_t i = 0; i < n; ++i) {
      const RowView r = step.row(i);
      const double ds = r.scale - 1.0;
      // Off the corrected columns the difference is (scale - 1) * L(i, j) >= 0 up to sign.
      double covered = 0.0;
      double s = 0.0;
      for (const Correction& c : r.corrections()) {
        covered += r.base[c.col];
        s += std::abs(ds * r.base[c.col] + c.value);
      }
      s += std::abs(ds) * (base.row_sums[i] - covered + r.base_tail);
      best = std::max(best, s);
    }
    return best;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const RowView r = step.row(i);
    const auto lim = limit.row(i);
    double s = std::abs(r.tail() - limit.tail_mass(i));
    for (std::size_t j = 0; j < n; ++j) s += std::abs(r.at(j) - lim[j]);
    best = std::max(best, s);
  }
  return best;
}

double dobrushin_delta(const TruncatedKernel& p) {
  const std::size_t n = p.size();
  double best = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = p.row(i);
    for (std::size_t l = i + 1; l < n; ++l) {
      const auto b = p.row(l);
      const double dt = p.tail_mass(i) - p.tail_mass(l);
      double pos = std::max(dt, 0.0);
      double neg = std::max(-dt, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double d = a[j] - b[j];
        if (d > 0.0) pos += d;
        else neg -= d;
      }
      best = std::max({best, pos, neg});
    }
  }
  return best;
}

namespace {

struct BandedRows {
  std::vector<double> scale;
  std::vector<std::array<Correction, 2>> corr;
  std::vector<std::uint8_t> n_corr;
  std::vector<double> pos;
  std::vector<double> neg;
  std::vector<std::size_t> main_rows;
  std::vector<std::size_t> other_rows;
  std::vector<std::ptrdiff_t> head;
  std::vector<std::ptrdiff_t> next;
  std::vector<std::size_t> entry_row;
  std::vector<std::size_t> by_pos;
  std::vector<std::size_t> by_neg;
};

double correction_at(const BandedRows& rows, std::size_t i, std::size_t col) {
  double v = 0.0;
  for (std::size_t c = 0; c < rows.n_corr[i]; ++c)
    if (rows.corr[i][c].col == col) v += rows.corr[i][c].value;
  return v;
}

bool supports_overlap(const BandedRows& rows, std::size_t a, std::size_t b) {
  for (std::size_t x = 0; x < rows.n_corr[a]; ++x)
    for (std::size_t y = 0; y < rows.n_corr[b]; ++y)
      if (rows.corr[a][x].col == rows.corr[b][y].col) return true;
  return false;
}

// sum_j [r_i(j) - r_l(j)]^+ with r_i = s_i * ell + d_i.
double pair_positive_part(const BandedRows& rows, std::span<const double> ell, double ell_total,
                          std::size_t i, std::size_t l) {
  std::array<std::size_t, 4> cols{};
  std::size_t n_cols = 0;
  auto add = [&](std::size_t c) {
    for (std::size_t x = 0; x < n_cols; ++x)
      if (cols[x] == c) return;
    cols[n_cols++] = c;
  };
  for (std::size_t c = 0; c < rows.n_corr[i]; ++c) add(rows.corr[i][c].col);
  for (std::size_t c = 0; c < rows.n_corr[l]; ++c) add(rows.corr[l][c].col);
  const double ds = rows.scale[i] - rows.scale[l];
  double covered = 0.0;
  double v = 0.0;
  for (std::size_t x = 0; x < n_cols; ++x) {
    const std::size_t j = cols[x];
    covered += ell[j];
    v += std::max(0.0, ds * ell[j] + correction_at(rows, i, j) - correction_at(rows, l, j));
  }
  v += std::max(ds, 0.0) * (ell_total - covered);
  return v;
}

}  // namespace

double dobrushin_delta_banded(const StepKernel& step) {
  const auto& base = step.base();
  if (!base.rank_one) throw InvalidModel("banded delta needs a base kernel with identical rows");
  const std::size_t n = step.size();
  thread_local BandedRows rows;
  rows.scale.resize(n);
  rows.corr.resize(n);
  rows.n_corr.resize(n);
  rows.pos.resize(n);
  rows.neg.resize(n);
  rows.main_rows.clear();
  rows.other_rows.clear();
  const auto ell = base.kernel.row(0);
  const double ell_total = base.row_sums[0] + base.kernel.tail_mass(0);

  for (std::size_t i = 0; i < n; ++i) {
    const RowView r = step.row(i);
    rows.scale[i] = r.scale;
    rows.n_corr[i] = static_cast<std::uint8_t>(r.n_corr);
    rows.corr[i] = r.corr;
    double pos = 0.0, neg = 0.0;
    for (const Correction& c : r.corrections()) {
      if (c.value > 0.0) pos += c.value;
      else neg -= c.value;
    }
    rows.pos[i] = pos;
    rows.neg[i] = neg;
    (r.scale == 1.0 ? rows.main_rows : rows.other_rows).push_back(i);
  }

  double best = 0.0;
  // Rows with a non-unit scale differ from every other row off the band too.
  for (std::size_t o : rows.other_rows) {
    for (std::size_t l = 0; l < n; ++l) {
      if (l == o) continue;
      best = std::max({best, pair_positive_part(rows, ell, ell_total, o, l),
                       pair_positive_part(rows, ell, ell_total, l, o)});
    }
  }
  if (rows.main_rows.size() < 2) return best;

  // Pairs whose corrections share a column: exact evaluation.
  rows.head.assign(n, -1);
  rows.next.clear();
  rows.entry_row.clear();
  for (std::size_t i : rows.main_rows) {
    for (std::size_t c = 0; c < rows.n_corr[i]; ++c) {
      const std::size_t col = rows.corr[i][c].col;
      rows.next.push_back(rows.head[col]);
      rows.entry_row.push_back(i);
      rows.head[col] = static_cast<std::ptrdiff_t>(rows.entry_row.size() - 1);
    }
  }
  std::vector<std::size_t> degree(0);
  std::size_t max_degree = 0;
  {
    thread_local std::vector<std::size_t> deg;
    deg.assign(n, 0);
    for (std::size_t col = 0; col < n; ++col) {
      for (std::ptrdiff_t e = rows.head[col]; e >= 0; e = rows.next[e]) {
        for (std::ptrdiff_t f = rows.next[e]; f >= 0; f = rows.next[f]) {
          const std::size_t a = rows.entry_row[e];
          const std::size_t b = rows.entry_row[f];
          if (a == b) continue;
          ++deg[a];
          ++deg[b];
          best = std::max({best, pair_positive_part(rows, ell, ell_total, a, b),
                           pair_positive_part(rows, ell, ell_total, b, a)});
        }
      }
    }
    for (std::size_t i : rows.main_rows) max_degree = std::max(max_degree, deg[i]);
  }

  // Disjoint pairs contribute pos(i) + neg(l). The best such pair lies among
  // the top (max_degree + 2) rows by pos and by neg: any row outside that set
  // can be swapped for one inside that is disjoint from its partner.
  const std::size_t k = std::min(rows.main_rows.size(), max_degree + 2);
  rows.by_pos = rows.main_rows;
  rows.by_neg = rows.main_rows;
  std::partial_sort(rows.by_pos.begin(), rows.by_pos.begin() + static_cast<std::ptrdiff_t>(k),
                    rows.by_pos.end(), [&](std::size_t a, std::size_t b) { return rows.pos[a] > rows.pos[b]; });
  std::partial_sort(rows.by_neg.begin(), rows.by_neg.begin() + static_cast<std::ptrdiff_t>(k),
                    rows.by_neg.end(), [&](std::size_t a, std::size_t b) { return rows.neg[a] > rows.neg[b]; });
  for (std::size_t x = 0; x < k; ++x) {
    for (std::size_t y = 0; y < k; ++y) {
      const std::size_t a = rows.by_pos[x];
      const std::size_t b = rows.by_neg[y];
      if (a == b || supports_overlap(rows, a, b)) continue;
      best = std::max(best, rows.pos[a] + rows.neg[b]);
    }
  }
  return best;
}

double dobrushin_delta(const StepKernel& step) {
  if (step.base().rank_one) return dobrushin_delta_banded(step);
  return dobrushin_delta(step.dense());
}

// ---------------------------------------------------------------------------

namespace {

std::vector<bool> reachable(const TruncatedKernel& p, bool forward) {
  const std::size_t n = p.size();
  std::vector<bool> seen(n, false);
  std::deque<std::size_t> queue{0};
  seen[0] = true;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (std::size_t v = 0; v < n; ++v) {
      const double w = forward ? p(u, v) : p(v, u);
      if (w > 0.0 && !seen[v]) {
        seen[v] = true;
        queue.push_back(v);
      }
    }
  }
  return seen;
}

std::vector<double> left_product(std::span<const double> pi, const TruncatedKernel& p) {
  const std::size_t n = p.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (pi[i] == 0.0) continue;
    const auto r = p.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] += pi[i] * r[j];
  }
  return out;
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

void normalize(std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  for (double& x : v) x /= s;
}

}  // namespace

bool is_irreducible(const TruncatedKernel& p) {
  const auto fwd = reachable(p, true);
  const auto bwd = reachable(p, false);
  return std::all_of(fwd.begin(), fwd.end(), [](bool b) { return b; }) &&
         std::all_of(bwd.begin(), bwd.end(), [](bool b) { return b; });
}

StationaryVector stationary(const TruncatedKernel& p, const StationaryOptions& options) {
  if (!is_irreducible(p)) throw NotIrreducible("stationary vector requested for a reducible kernel");
  const std::size_t n = p.size();
  StationaryVector out;
  std::vector<double> pi(n, 1.0 / static_cast<double>(n));
  const double work_per_iteration = static_cast<double>(n) * static_cast<double>(n);
  const auto cap = static_cast<std::size_t>(
      std::min(static_cast<double>(options.max_iterations), options.max_work / work_per_iteration));
  bool converged = false;
  for (std::size_t it = 1; it <= std::max<std::size_t>(cap, 1); ++it) {
    std::vector<double> next = left_product(pi, p);
    normalize(next);
    const double diff = l1_distance(next, pi);
    pi = std::move(next);
    out.iterations = it;
    if (diff < options.tolerance) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    // (P^T - I) pi = 0 with sum(pi) = 1 appended, solved in least squares.
    Eigen::MatrixXd a(n + 1, n);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n + 1));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = p(i, j) - (i == j ? 1.0 : 0.0);
    for (std::size_t j = 0; j < n; ++j) a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j)) = 1.0;
    b(static_cast<Eigen::Index>(n)) = 1.0;
    const Eigen::VectorXd x = a.colPivHouseholderQr().solve(b);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x(static_cast<Eigen::Index>(i));
      if (v < -1e-9) throw ConvergenceFailure("stationary solve produced a negative component");
      pi[i] = std::max(v, 0.0);
    }
    normalize(pi);
    out.used_linear_solve = true;
  }
  const auto image = left_product(pi, p);
  out.residual = l1_distance(image, pi);
  if (!(out.residual <= options.residual_limit))
    throw ConvergenceFailure("stationary vector residual " + std::to_string(out.residual) +
                             " above limit");
  out.pi = std::move(pi);
  return out;
}

std::size_t period(const TruncatedKernel& p) {
  if (!is_irreducible(p)) throw NotIrreducible("period requested for a reducible kernel");
  const std::size_t n = p.size();
  std::vector<long> level(n, -1);
  std::deque<std::size_t> queue{0};
  level[0] = 0;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (std::size_t v = 0; v < n; ++v) {
      if (p(u, v) > 0.0 && level[v] < 0) {
        level[v] = level[u] + 1;
        queue.push_back(v);
      }
    }
  }
  long g = 0;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (p(u, v) > 0.0) g = std::gcd(g, std::labs(level[u] + 1 - level[v]));
  return static_cast<std::size_t>(g);
}

std::vector<double> strong_ergodicity_profile(const TruncatedKernel& p, std::span<const double> pi,
                                              std::span<const std::size_t> k_grid) {
  if (pi.size() != p.size()) throw InvalidModel("stationary row has the wrong length");
  const std::size_t n = p.size();
  const KernelFamily family = KernelFamily::constant(p);
  const StepKernel step = family.limit_step();
  Matrix power = p.matrix();
  std::size_t current = 1;
  std::vector<double> out;
  out.reserve(k_grid.size());
  for (std::size_t k : k_grid) {
    if (k < current) throw InvalidModel("k_grid must be increasing and start at k >= 1");
    while (current < k) {
      power = step.right_multiply(power);
      ++current;
    }
    Matrix diff = power;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) diff(i, j) -= pi[j];
    out.push_back(sup_row_norm(diff));
  }
  return out;
}

std::vector<double> strong_ergodicity_profile(const TruncatedKernel& p, std::span<const std::size_t> k_grid) {
  const StationaryVector pi = stationary(p);
  return strong_ergodicity_profile(p, pi.pi, k_grid);
}

// ---------------------------------------------------------------------------

namespace {

void check_grid(std::span<const std::size_t> n_grid) {
  if (n_grid.empty()) throw InvalidModel("condition profile needs a nonempty n grid");
  if (n_grid.front() == 0) throw InvalidModel("condition profile grid starts at n >= 1");
  for (std::size_t i = 1; i < n_grid.size(); ++i)
    if (n_grid[i] <= n_grid[i - 1]) throw InvalidModel("condition profile grid must be strictly increasing");
}

// prefix[k] = sum of values[1..k].
std::vector<double> prefix_sums(const std::vector<double>& per_step) {
  std::vector<double> prefix(per_step.size() + 1, 0.0);
  for (std::size_t k = 0; k < per_step.size(); ++k) prefix[k + 1] = prefix[k] + per_step[k];
  return prefix;
}

ConditionProfile average_diff_profile(const KernelFamily& family, std::span<const std::size_t> n_grid,
                                      std::size_t m_sup, unsigned workers) {
  const std::size_t horizon = n_grid.back() + m_sup;
  std::vector<double> norms(horizon);
  parallel_for(horizon, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx)
      norms[idx] = distance_to_limit(family.step(idx + 1), family.limit());
  });
  const auto prefix = prefix_sums(norms);
  ConditionProfile out;
  out.condition = Condition::AverageDiff;
  out.m_sup_range = m_sup;
  for (std::size_t n : n_grid) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t m = 0; m <= m_sup; ++m) {
      const double v = (prefix[m + n] - prefix[m]) / static_cast<double>(n);
      if (v > best) {
        best = v;
        arg = m;
      }
    }
    out.n_grid.push_back(n);
    out.values.push_back(best);
    out.argmax_m.push_back(arg);
  }
  return out;
}

ConditionProfile delta_sum_profile(const KernelFamily& family, std::span<const std::size_t> n_grid,
                                   unsigned workers) {
  const std::size_t horizon = n_grid.back();
  std::vector<double> deltas(horizon);
  parallel_for(horizon, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) deltas[idx] = dobrushin_delta(family.step(idx + 1));
  });
  const auto prefix = prefix_sums(deltas);
  ConditionProfile out;
  out.condition = Condition::DeltaSum;
  for (std::size_t n : n_grid) {
    out.n_grid.push_back(n);
    out.values.push_back(prefix[n] / std::sqrt(static_cast<double>(n)));
    out.argmax_m.push_back(0);
  }
  return out;
}

ConditionProfile cesaro_profile(const KernelFamily& family, std::span<const std::size_t> n_grid,
                                std::size_t m_sup, unsigned workers) {
  const std::size_t n_states = family.size();
  const StationaryVector pi = stationary(family.limit());
  const std::size_t horizon = n_grid.back();
  // values[m][g]
  std::vector<std::vector<double>> values(m_sup + 1, std::vector<double>(n_grid.size()));
  parallel_for(m_sup + 1, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) {
      Matrix product = Matrix::identity(n_states);
      Matrix running(n_states, n_states);
      std::size_t g = 0;
      for (std::size_t t = 1; t <= horizon; ++t) {
        product = family.step(m + t).right_multiply(product);
        running += product;
        if (t == n_grid[g]) {
          const double inv = 1.0 / static_cast<double>(t);
          double best = 0.0;
          for (std::size_t i = 0; i < n_states; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n_states; ++j) s += std::abs(running(i, j) * inv - pi.pi[j]);
            best = std::max(best, s);
          }
          values[m][g++] = best;
        }
      }
    }
  });
  ConditionProfile out;
  out.condition = Condition::Cesaro;
  out.m_sup_range = m_sup;
  for (std::size_t g = 0; g < n_grid.size(); ++g) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t m = 0; m <= m_sup; ++m) {
      if (values[m][g] > best) {
        best = values[m][g];
        arg = m;
      }
    }
    out.n_grid.push_back(n_grid[g]);
    out.values.push_back(best);
    out.argmax_m.push_back(arg);
  }
  return out;
}

}  // namespace

ConditionProfile condition_profile(const KernelFamily& family, Condition condition,
                                   std::span<const std::size_t> n_grid, std::size_t m_sup_range,
                                   unsigned workers) {
  check_grid(n_grid);
  switch (condition) {
    case Condition::AverageDiff:
      return average_diff_profile(family, n_grid, m_sup_range, workers);
    case Condition::DeltaSum:
      return delta_sum_profile(family, n_grid, workers);
    case Condition::Cesaro:
      return cesaro_profile(family, n_grid, m_sup_range, workers);
  }
  throw InvalidModel("unknown condition");
}

}  // namespace nhmc
