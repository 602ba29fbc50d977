#include "nhmc/chain_core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "nhmc/errors.hpp"

namespace nhmc {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double checked_entry(double v, double tolerance, std::size_t i, std::size_t j) {
  if (!std::isfinite(v) || v < -tolerance || v > 1.0 + tolerance) {
    std::ostringstream msg;
    msg << "kernel entry (" << i << ", " << j << ") = " << v << " is not a probability";
    throw InvalidModel(msg.str());
  }
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

std::string to_string(TailPolicy policy) {
  return policy == TailPolicy::LumpToLast ? "lump" : "renormalize";
}

TailPolicy tail_policy_from_string(const std::string& name) {
  if (name == "lump" || name == "lump_to_last") return TailPolicy::LumpToLast;
  if (name == "renormalize") return TailPolicy::Renormalize;
  throw InvalidModel("unknown tail policy '" + name + "'");
}

// ---------------------------------------------------------------------------
// TruncatedKernel

TruncatedKernel::TruncatedKernel(Matrix rows) : TruncatedKernel(std::move(rows), kRowSumTolerance) {}

TruncatedKernel::TruncatedKernel(Matrix rows, double row_tolerance) : rows_(std::move(rows)) {
  const std::size_t n = rows_.rows();
  if (n < 2 || rows_.cols() != n)
    throw InvalidModel("a truncated kernel must be square with at least 2 states");
  tail_.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      rows_(i, j) = checked_entry(rows_(i, j), kEntryTolerance, i, j);
      sum += rows_(i, j);
    }
    const double tail = 1.0 - sum;
    if (tail < -row_tolerance) {
      std::ostringstream msg;
      msg << "row " << i << " sums to " << sum << ", above one";
      throw InvalidModel(msg.str());
    }
    tail_[i] = std::max(tail, 0.0);
  }
}

TruncatedKernel TruncatedKernel::identity(std::size_t n) { return TruncatedKernel(Matrix::identity(n)); }

TruncatedKernel TruncatedKernel::identical_rows(std::span<const double> row) {
  Matrix m(row.size(), row.size());
  for (std::size_t i = 0; i < row.size(); ++i) std::copy(row.begin(), row.end(), m.row(i).begin());
  return TruncatedKernel(std::move(m));
}

double TruncatedKernel::max_tail_mass() const { return *std::max_element(tail_.begin(), tail_.end()); }

TruncatedKernel TruncatedKernel::resolve_tail(TailPolicy policy) const {
  Matrix m = rows_;
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) {
    if (tail_[i] == 0.0) continue;
    if (policy == TailPolicy::LumpToLast) {
      m(i, n - 1) += tail_[i];
    } else {
      const double kept = 1.0 - tail_[i];
      if (kept <= 0.0) throw InvalidModel("cannot renormalize a row with no retained mass");
      for (double& v : m.row(i)) v /= kept;
    }
  }
  return TruncatedKernel(std::move(m));
}

bool TruncatedKernel::has_identical_rows() const {
  const auto first = row(0);
  for (std::size_t i = 1; i < size(); ++i)
    if (!std::equal(first.begin(), first.end(), row(i).begin())) return false;
  return std::all_of(tail_.begin(), tail_.end(), [&](double t) { return t == tail_[0]; });
}

// ---------------------------------------------------------------------------
// InitialDistribution, Observable, DistributionVector

InitialDistribution::InitialDistribution(std::vector<double> probs, double tail_mass)
    : probs_(std::move(probs)), tail_mass_(tail_mass) {
  if (probs_.empty()) throw InvalidModel("initial distribution needs at least one state");
  double sum = tail_mass_;
  if (!(tail_mass_ >= -kEntryTolerance)) throw InvalidModel("negative initial tail mass");
  tail_mass_ = std::max(tail_mass_, 0.0);
  for (double& p : probs_) {
    if (!std::isfinite(p) || p < -kEntryTolerance) throw InvalidModel("negative initial probability");
    p = std::max(p, 0.0);
    sum += p;
  }
  if (std::abs(sum - 1.0) > kRowSumTolerance) {
    std::ostringstream msg;
    msg << "initial distribution has total mass " << sum;
    throw InvalidModel(msg.str());
  }
  cdf_.resize(probs_.size());
  double acc = 0.0;
  for (std::size_t j = 0; j < probs_.size(); ++j) cdf_[j] = acc += probs_[j];
}

InitialDistribution InitialDistribution::point_mass(std::size_t n_states, std::size_t state) {
  if (state >= n_states) throw InvalidModel("point mass outside the retained states");
  std::vector<double> p(n_states, 0.0);
  p[state] = 1.0;
  return InitialDistribution(std::move(p));
}

InitialDistribution InitialDistribution::uniform(std::size_t n_states) {
  return InitialDistribution(std::vector<double>(n_states, 1.0 / static_cast<double>(n_states)));
}

std::size_t InitialDistribution::sample(double u) const {
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return it == cdf_.end() ? cdf_.size() - 1 : static_cast<std::size_t>(it - cdf_.begin());
}

Observable::Observable(std::vector<double> values, double tail_value)
    : values_(std::move(values)), tail_value_(tail_value), bound_(std::abs(tail_value)) {
  if (!std::isfinite(tail_value_)) throw InvalidModel("observable tail value must be finite");
  for (double v : values_) {
    if (!std::isfinite(v)) throw InvalidModel("observable values must be finite");
    bound_ = std::max(bound_, std::abs(v));
  }
}

Observable Observable::constant(std::size_t n_states, double c) {
  return Observable(std::vector<double>(n_states, c), c);
}

Observable Observable::indicator(std::size_t n_states, std::size_t state) {
  if (state >= n_states) throw InvalidModel("indicator state outside the retained states");
  std::vector<double> v(n_states, 0.0);
  v[state] = 1.0;
  return Observable(std::move(v), 0.0);
}

Observable Observable::capped_identity(std::size_t n_states, double cap) {
  std::vector<double> v(n_states);
  for (std::size_t s = 0; s < n_states; ++s) v[s] = std::min(static_cast<double>(s + 1), cap);
  return Observable(std::move(v), cap);
}

bool Observable::is_integer_valued() const {
  auto integral = [](double v) { return std::nearbyint(v) == v; };
  return integral(tail_value_) && std::all_of(values_.begin(), values_.end(), integral);
}

Observable Observable::operator+(double c) const {
  std::vector<double> v = values_;
  for (double& x : v) x += c;
  return Observable(std::move(v), tail_value_ + c);
}

Observable Observable::operator*(double a) const {
  std::vector<double> v = values_;
  for (double& x : v) x *= a;
  return Observable(std::move(v), tail_value_ * a);
}

Observable linear_combination(std::span<const Observable> observables, std::span<const double> weights) {
  if (observables.empty() || observables.size() != weights.size())
    throw InvalidModel("linear combination needs one weight per observable");
  const std::size_t n = observables.front().size();
  std::vector<double> v(n, 0.0);
  double tail = 0.0;
  for (std::size_t l = 0; l < observables.size(); ++l) {
    if (observables[l].size() != n) throw InvalidModel("observables defined on different state counts");
    for (std::size_t s = 0; s < n; ++s) v[s] += weights[l] * observables[l](s);
    tail += weights[l] * observables[l].tail_value();
  }
  return Observable(std::move(v), tail);
}

double DistributionVector::total_mass() const {
  double s = tail_mass;
  for (double p : probs) s += p;
  return s;
}

double DistributionVector::expectation(const Observable& f) const {
  double s = tail_mass * f.tail_value();
  for (std::size_t j = 0; j < probs.size(); ++j) s += probs[j] * f(j);
  return s;
}

// ---------------------------------------------------------------------------
// StepKernel

std::vector<double> StepKernel::left_multiply(std::span<const double> mu, double* tail_out) const {
  const std::size_t n = size();
  std::vector<double> out(n, 0.0);
  double tail = 0.0;
  if (base_->rank_one) {
    double weight = 0.0;
    for (std::size_t i = 0; i < n; ++i) weight += mu[i] * row_scale(i);
    const auto ell = base_->kernel.row(0);
    for (std::size_t j = 0; j < n; ++j) out[j] = weight * ell[j];
    tail = weight * base_->kernel.tail_mass(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = mu[i] * row_scale(i);
      if (w == 0.0) continue;
      const auto src = base_->kernel.row(i);
      for (std::size_t j = 0; j < n; ++j) out[j] += w * src[j];
      tail += w * base_->kernel.tail_mass(i);
    }
  }
  if (perturbed()) {
    for (std::size_t i = 0; i < n; ++i) {
      if (mu[i] == 0.0) continue;
      const RowView r = row(i);
      for (const Correction& c : r.corrections()) out[c.col] += mu[i] * c.value;
    }
  }
  if (tail_out != nullptr) *tail_out = tail;
  return out;
}

Matrix StepKernel::right_multiply(const Matrix& a) const {
  const std::size_t n = size();
  Matrix out(a.rows(), n);
  std::vector<double> scales(n);
  for (std::size_t i = 0; i < n; ++i) scales[i] = row_scale(i);
  if (base_->rank_one) {
    const auto ell = base_->kernel.row(0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double w = 0.0;
      for (std::size_t i = 0; i < n; ++i) w += a(r, i) * scales[i];
      auto dst = out.row(r);
      for (std::size_t j = 0; j < n; ++j) dst[j] = w * ell[j];
    }
  } else {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      auto dst = out.row(r);
      for (std::size_t i = 0; i < n; ++i) {
        const double w = a(r, i) * scales[i];
        if (w == 0.0) continue;
        const auto src = base_->kernel.row(i);
        for (std::size_t j = 0; j < n; ++j) dst[j] += w * src[j];
      }
    }
  }
  if (perturbed()) {
    for (std::size_t i = 0; i < n; ++i) {
      const RowView rv = row(i);
      for (const Correction& c : rv.corrections())
        for (std::size_t r = 0; r < a.rows(); ++r) out(r, c.col) += a(r, i) * c.value;
    }
  }
  return out;
}

std::vector<double> StepKernel::apply(const Observable& f) const {
  const std::size_t n = size();
  std::vector<double> out(n);
  const auto values = f.values();
  auto base_image = [&](std::size_t i) {
    const auto src = base_->kernel.row(i);
    double s = base_->kernel.tail_mass(i) * f.tail_value();
    for (std::size_t j = 0; j < n; ++j) s += src[j] * values[j];
    return s;
  };
  const double shared = base_->rank_one ? base_image(0) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const RowView r = row(i);
    double v = r.scale * (base_->rank_one ? shared : base_image(i));
    for (const Correction& c : r.corrections()) v += c.value * values[c.col];
    out[i] = v;
  }
  return out;
}

TruncatedKernel StepKernel::dense() const {
  const std::size_t n = size();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const RowView r = row(i);
    auto dst = m.row(i);
    for (std::size_t j = 0; j < n; ++j) dst[j] = r.scale * r.base[j];
    for (const Correction& c : r.corrections()) dst[c.col] += c.value;
  }
  return TruncatedKernel(std::move(m));
}

// ---------------------------------------------------------------------------
// KernelFamily

struct KernelFamily::Impl {
  Kind kind = Kind::Constant;
  double alpha = 0.0;
  double beta = 0.0;
  TailPolicy policy = TailPolicy::LumpToLast;
  std::size_t n = 0;
  // bases[0] is the limit; table entries follow in order.
  std::vector<std::unique_ptr<detail::DenseBase>> bases;
  std::vector<double> base_truncated;  // tail mass resolved per base
  std::optional<detail::Band> band;
  double limit_residual = 0.0;         // 1 - finite row sum of the example rows

  double amplitude(std::size_t k) const {
    const double kd = static_cast<double>(k);
    switch (kind) {
      case Kind::Example1:
        return std::pow(kd, -alpha);
      case Kind::Example2:
        return std::pow(std::log(kd), beta) * std::pow(kd, -alpha);
      default:
        return 0.0;
    }
  }

  void add_base(const TruncatedKernel& raw) {
    auto base = std::make_unique<detail::DenseBase>(
        detail::DenseBase{raw.resolve_tail(policy), {}, {}, false, bases.size()});
    const std::size_t size = base->kernel.size();
    base->rank_one = base->kernel.has_identical_rows();
    const std::size_t cdf_rows = base->rank_one ? 1 : size;
    base->cdf.resize(cdf_rows * size);
    for (std::size_t i = 0; i < cdf_rows; ++i) {
      double acc = 0.0;
      const auto src = base->kernel.row(i);
      for (std::size_t j = 0; j < size; ++j) base->cdf[i * size + j] = acc += src[j];
    }
    base->row_sums.resize(size);
    for (std::size_t i = 0; i < size; ++i) {
      const auto src = base->kernel.row(i);
      double s = 0.0;
      for (double v : src) s += v;
      base->row_sums[i] = s;
    }
    base_truncated.push_back(raw.max_tail_mass());
    bases.push_back(std::move(base));
  }
};

namespace {

std::shared_ptr<KernelFamily::Impl> make_example_impl(KernelFamily::Kind kind, double alpha,
                                                      double beta, std::size_t n_states,
                                                      TailPolicy policy) {
  if (!(alpha > 0.5) || !std::isfinite(alpha))
    throw InvalidModel("example kernels require alpha > 1/2");
  if (n_states < 3) throw InvalidModel("example kernels need N >= 3 to hold the (i-1, i, i+1) band");
  if (kind == KernelFamily::Kind::Example2) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidModel("example 2 requires beta > 0");
    // sup_k (log k)^beta k^-alpha = (beta / (alpha e))^beta; above one the
    // diagonal entries turn negative for some k.
    if (beta > alpha * std::numbers::e)
      throw InvalidModel("example 2 requires beta <= alpha * e for nonnegative diagonal entries");
  }
  auto impl = std::make_shared<KernelFamily::Impl>();
  impl->kind = kind;
  impl->alpha = alpha;
  impl->beta = kind == KernelFamily::Kind::Example2 ? beta : 0.0;
  impl->policy = policy;
  impl->n = n_states;

  const double pi = std::numbers::pi;
  const bool quartic = kind == KernelFamily::Kind::Example2;
  const double c = quartic ? 90.0 / (pi * pi * pi * pi) : 6.0 / (pi * pi);
  std::vector<double> raw(n_states);
  double finite_sum = 0.0;
  for (std::size_t j = 0; j < n_states; ++j) {
    const double label = static_cast<double>(j + 1);
    const double denom = quartic ? label * label * label * label : label * label;
    raw[j] = c / denom;
    finite_sum += raw[j];
  }
  impl->limit_residual = 1.0 - finite_sum;

  std::vector<double> row = raw;
  detail::Band band;
  band.policy = policy;
  band.last_raw = raw.back();
  if (policy == TailPolicy::LumpToLast) {
    row.back() += impl->limit_residual;
    band.norm = 1.0;
  } else {
    for (double& v : row) v /= finite_sum;
    band.norm = finite_sum;
  }
  band.coef.resize(n_states);
  for (std::size_t i = 0; i < n_states; ++i)
    band.coef[i] = policy == TailPolicy::LumpToLast ? raw[i] : raw[i] / finite_sum;
  impl->band = std::move(band);
  impl->add_base(TruncatedKernel::identical_rows(row));
  impl->base_truncated[0] = impl->limit_residual;
  return impl;
}

}  // namespace

KernelFamily KernelFamily::constant(const TruncatedKernel& kernel, TailPolicy policy) {
  auto impl = std::make_shared<Impl>();
  impl->kind = Kind::Constant;
  impl->policy = policy;
  impl->n = kernel.size();
  impl->add_base(kernel);
  return KernelFamily(std::move(impl));
}

KernelFamily KernelFamily::example1(double alpha, std::size_t n_states, TailPolicy policy) {
  return KernelFamily(make_example_impl(Kind::Example1, alpha, 0.0, n_states, policy));
}

KernelFamily KernelFamily::example2(double alpha, double beta, std::size_t n_states, TailPolicy policy) {
  return KernelFamily(make_example_impl(Kind::Example2, alpha, beta, n_states, policy));
}

KernelFamily KernelFamily::table(std::vector<TruncatedKernel> kernels, std::optional<TruncatedKernel> limit,
                                 TailPolicy policy) {
  if (kernels.empty()) throw InvalidModel("a table family needs at least one kernel");
  const std::size_t n = kernels.front().size();
  for (const auto& k : kernels)
    if (k.size() != n) throw InvalidModel("table kernels must share the state count");
  if (limit && limit->size() != n) throw InvalidModel("table limit has the wrong state count");
  auto impl = std::make_shared<Impl>();
  impl->kind = Kind::Table;
  impl->policy = policy;
  impl->n = n;
  impl->add_base(limit ? *limit : kernels.back());
  for (const auto& k : kernels) impl->add_base(k);
  return KernelFamily(std::move(impl));
}

KernelFamily::Kind KernelFamily::kind() const { return impl_->kind; }
double KernelFamily::alpha() const { return impl_->alpha; }
double KernelFamily::beta() const { return impl_->beta; }
std::size_t KernelFamily::size() const { return impl_->n; }
TailPolicy KernelFamily::tail_policy() const { return impl_->policy; }
const TruncatedKernel& KernelFamily::limit() const { return impl_->bases[0]->kernel; }
std::size_t KernelFamily::base_count() const { return impl_->bases.size(); }
const detail::DenseBase& KernelFamily::base(std::size_t index) const { return *impl_->bases.at(index); }

StepKernel KernelFamily::limit_step() const { return StepKernel(impl_->bases[0].get(), nullptr, 0.0, 0); }

StepKernel KernelFamily::step(std::size_t k) const {
  if (k == 0) throw InvalidModel("kernel steps are indexed from k = 1");
  switch (impl_->kind) {
    case Kind::Constant:
      return StepKernel(impl_->bases[0].get(), nullptr, 0.0, k);
    case Kind::Table: {
      const std::size_t table_size = impl_->bases.size() - 1;
      const std::size_t idx = k <= table_size ? k : 0;
      return StepKernel(impl_->bases[idx].get(), nullptr, 0.0, k);
    }
    default:
      return StepKernel(impl_->bases[0].get(), &*impl_->band, impl_->amplitude(k), k);
  }
}

std::vector<StepKernel> KernelFamily::steps(std::size_t first, std::size_t last) const {
  std::vector<StepKernel> out;
  if (last < first) return out;
  out.reserve(last - first + 1);
  for (std::size_t k = first; k <= last; ++k) out.push_back(step(k));
  return out;
}

double KernelFamily::truncated_mass(std::size_t k) const {
  switch (impl_->kind) {
    case Kind::Constant:
      return impl_->base_truncated[0];
    case Kind::Table: {
      const std::size_t table_size = impl_->bases.size() - 1;
      return impl_->base_truncated[k >= 1 && k <= table_size ? k : 0];
    }
    default:
      // The last row also sends its band mass to state N + 1.
      return impl_->limit_residual + impl_->band->last_raw * impl_->amplitude(k);
  }
}

std::string to_string(KernelFamily::Kind kind) {
  switch (kind) {
    case KernelFamily::Kind::Constant:
      return "constant";
    case KernelFamily::Kind::Example1:
      return "example1";
    case KernelFamily::Kind::Example2:
      return "example2";
    case KernelFamily::Kind::Table:
      return "table";
  }
  return "unknown";
}

namespace {

KernelFamily example_family(KernelFamily::Kind kind, double alpha, double beta, std::size_t n_states,
                            TailPolicy policy) {
  switch (kind) {
    case KernelFamily::Kind::Example1:
      return KernelFamily::example1(alpha, n_states, policy);
    case KernelFamily::Kind::Example2:
      return KernelFamily::example2(alpha, beta, n_states, policy);
    default:
      throw InvalidModel("only the example families have a closed-form kernel");
  }
}

}  // namespace

TruncatedKernel make_example_kernel(KernelFamily::Kind kind, double alpha, double beta, std::size_t k,
                                    std::size_t n_states, TailPolicy policy) {
  return example_family(kind, alpha, beta, n_states, policy).kernel_at(k);
}

TruncatedKernel make_limit_kernel(KernelFamily::Kind kind, double alpha, double beta, std::size_t n_states,
                                  TailPolicy policy) {
  return example_family(kind, alpha, beta, n_states, policy).limit();
}

TruncatedKernel kernel_product(const KernelFamily& family, std::size_t m, std::size_t n) {
  if (n <= m) throw InvalidModel("kernel_product requires n > m");
  Matrix acc = family.step(m + 1).dense().matrix();
  for (std::size_t k = m + 2; k <= n; ++k) acc = family.step(k).right_multiply(acc);
  return TruncatedKernel(std::move(acc), kMassTolerance);
}

// ---------------------------------------------------------------------------
// Propagation and sampling

Propagator::Propagator(const InitialDistribution& mu0, const KernelFamily& family) : family_(&family) {
  if (mu0.size() != family.size()) throw InvalidModel("initial distribution and family differ in N");
  current_.probs.assign(mu0.probs().begin(), mu0.probs().end());
  current_.tail_mass = mu0.tail_mass();
  current_.step = 0;
}

void Propagator::advance() {
  const StepKernel step = family_->step(current_.step + 1);
  double routed = 0.0;
  current_.probs = step.left_multiply(current_.probs, &routed);
  // Mass beyond state N stays there.
  current_.tail_mass += routed;
  current_.step += 1;
}

DistributionVector propagate(const InitialDistribution& mu0, const KernelFamily& family, std::size_t k) {
  Propagator prop(mu0, family);
  for (std::size_t s = 0; s < k; ++s) prop.advance();
  return prop.current();
}

std::vector<double> expected_values(const InitialDistribution& mu0, const KernelFamily& family,
                                    const Observable& f, std::size_t n) {
  if (f.size() != family.size()) throw InvalidModel("observable and family differ in N");
  Propagator prop(mu0, family);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    prop.advance();
    out[k] = prop.current().expectation(f);
  }
  return out;
}

double expected_Sn(const InitialDistribution& mu0, const KernelFamily& family, const Observable& f,
                   std::size_t n) {
  if (n == 0) throw InvalidModel("expected_Sn requires n >= 1");
  double total = 0.0;
  for (double v : expected_values(mu0, family, f, n)) total += v;
  return total;
}

Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

std::vector<std::size_t> sample_trajectory(std::uint64_t seed, const InitialDistribution& mu0,
                                           const KernelFamily& family, std::size_t n) {
  if (mu0.size() != family.size()) throw InvalidModel("initial distribution and family differ in N");
  if (mu0.tail_mass() > kRowSumTolerance)
    throw InvalidModel("sampling needs an initial distribution without tail mass");
  Rng rng = make_rng(seed);
  std::vector<std::size_t> path(n + 1);
  path[0] = mu0.sample(uniform01(rng));
  for (std::size_t k = 1; k <= n; ++k) path[k] = family.step(k).row(path[k - 1]).sample(uniform01(rng));
  return path;
}

}  // namespace nhmc
