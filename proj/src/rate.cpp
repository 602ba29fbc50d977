#include "nhmc/rate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "nhmc/errors.hpp"

namespace nhmc {

namespace {

void check_sizes(std::span<const double> pi, const TruncatedKernel& p, const Observable& f) {
  if (pi.size() != p.size() || f.size() != p.size())
    throw InvalidModel("pi, kernel and observable must share the state count");
}

Eigen::MatrixXd to_eigen(const Matrix& q) {
  if (q.rows() != q.cols()) throw InvalidModel("quadratic form must be square");
  Eigen::MatrixXd m(q.rows(), q.cols());
  for (std::size_t a = 0; a < q.rows(); ++a)
    for (std::size_t b = 0; b < q.cols(); ++b) m(a, b) = q(a, b);
  return m;
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen_of(const Matrix& q) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(to_eigen(q));
}

double cutoff(const Eigen::VectorXd& lambda) {
  const double top = lambda.size() > 0 ? lambda.maxCoeff() : 0.0;
  return 1e-10 * std::max(top, 0.0);
}

}  // namespace

std::vector<double> conditional_mean(const TruncatedKernel& p, const Observable& f) {
  const std::size_t n = p.size();
  std::vector<double> out(n);
  const auto values = f.values();
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = p.row(i);
    double s = p.tail_mass(i) * f.tail_value();
    for (std::size_t j = 0; j < n; ++j) s += r[j] * values[j];
    out[i] = s;
  }
  return out;
}

ThetaForms theta_forms(std::span<const double> pi, const TruncatedKernel& p, const Observable& f) {
  check_sizes(pi, p, f);
  const std::size_t n = p.size();
  const auto pf = conditional_mean(p, f);
  const auto values = f.values();
  ThetaForms out;
  for (std::size_t i = 0; i < n; ++i) {
    if (pi[i] == 0.0) continue;
    out.variance_gap += pi[i] * (values[i] * values[i] - pf[i] * pf[i]);
    const auto r = p.row(i);
    const double dt = f.tail_value() - pf[i];
    double cv = p.tail_mass(i) * dt * dt;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = values[j] - pf[i];
      cv += r[j] * d * d;
    }
    out.conditional_variance += pi[i] * cv;
  }
  return out;
}

double theta(std::span<const double> pi, const TruncatedKernel& p, const Observable& f) {
  const ThetaForms forms = theta_forms(pi, p, f);
  const double scale = std::max(1.0, f.bound() * f.bound());
  if (std::abs(forms.variance_gap - forms.conditional_variance) > kThetaAgreement * scale)
    throw InvalidModel("theta forms disagree (" + std::to_string(forms.variance_gap) + " vs " +
                       std::to_string(forms.conditional_variance) +
                       "): pi is not stationary for the kernel or the kernel leaks mass");
  return forms.variance_gap;
}

double rate_1d(double x, double theta_value) {
  if (!(theta_value > 0.0))
    throw HypothesisViolation("the rate x^2/(2 theta) needs theta(f) > 0, got " + std::to_string(theta_value));
  return x * x / (2.0 * theta_value);
}

Matrix q_matrix(std::span<const double> pi, const TruncatedKernel& p, std::span<const Observable> observables,
                double psd_tolerance) {
  const std::size_t m = observables.size();
  if (m == 0) throw InvalidModel("q_matrix needs at least one observable");
  for (const auto& f : observables) check_sizes(pi, p, f);
  const std::size_t n = p.size();
  std::vector<std::vector<double>> pf(m);
  for (std::size_t a = 0; a < m; ++a) pf[a] = conditional_mean(p, observables[a]);
  Matrix q(m, m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a; b < m; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        s += pi[i] * (observables[a](i) * observables[b](i) - pf[a][i] * pf[b][i]);
      q(a, b) = s;
      q(b, a) = s;
    }
  }
  const auto lambda = eigenvalues(q);
  if (!lambda.empty() && lambda.front() < -psd_tolerance)
    throw InvalidModel("Q is not positive semidefinite: smallest eigenvalue " + std::to_string(lambda.front()));
  return q;
}

std::vector<double> eigenvalues(const Matrix& q) {
  const auto solver = eigen_of(q);
  const Eigen::VectorXd& lambda = solver.eigenvalues();
  return {lambda.data(), lambda.data() + lambda.size()};
}

std::size_t numerical_rank(const Matrix& q) {
  const auto solver = eigen_of(q);
  const double cut = cutoff(solver.eigenvalues());
  std::size_t r = 0;
  for (Eigen::Index k = 0; k < solver.eigenvalues().size(); ++k)
    if (solver.eigenvalues()(k) > cut) ++r;
  return r;
}

QuadraticConjugate quadratic_conjugate(std::span<const double> x, const Matrix& q) {
  const std::size_t m = q.rows();
  if (x.size() != m) throw InvalidModel("rate_md: x and Q differ in dimension");
  const auto solver = eigen_of(q);
  const Eigen::VectorXd& lambda = solver.eigenvalues();
  const Eigen::MatrixXd& v = solver.eigenvectors();
  const double cut = cutoff(lambda);
  const Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(m));
  const Eigen::VectorXd c = v.transpose() * xv;
  double off = 0.0;
  double value = 0.0;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  for (Eigen::Index k = 0; k < lambda.size(); ++k) {
    if (lambda(k) > cut && lambda(k) > 0.0) {
      value += 0.5 * c(k) * c(k) / lambda(k);
      z += (c(k) / lambda(k)) * v.col(k);
    } else {
      off += c(k) * c(k);
    }
  }
  QuadraticConjugate out;
  if (std::sqrt(off) > 1e-8 * xv.norm()) {
    out.value = kInfinity;
    return out;
  }
  out.value = value;
  out.z.assign(z.data(), z.data() + z.size());
  return out;
}

double rate_md(std::span<const double> x, const Matrix& q) { return quadratic_conjugate(x, q).value; }

double conjugate_objective(std::span<const double> x, std::span<const double> z, const Matrix& q) {
  const std::size_t m = q.rows();
  double lin = 0.0, quad = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    lin += x[a] * z[a];
    for (std::size_t b = 0; b < m; ++b) quad += z[a] * q(a, b) * z[b];
  }
  return lin - 0.5 * quad;
}

double halfspace_infimum(std::span<const double> w, double x, const Matrix& q) {
  if (w.size() != q.rows()) throw InvalidModel("halfspace normal and Q differ in dimension");
  if (x <= 0.0) return 0.0;
  double wqw = 0.0;
  for (std::size_t a = 0; a < q.rows(); ++a)
    for (std::size_t b = 0; b < q.rows(); ++b) wqw += w[a] * q(a, b) * w[b];
  if (!(wqw > 0.0)) return kInfinity;
  return x * x / (2.0 * wqw);
}

double level_set_radius_bound(double level, const Matrix& q) {
  const auto lambda = eigenvalues(q);
  const double top = lambda.empty() ? 0.0 : std::max(lambda.back(), 0.0);
  return std::sqrt(2.0 * level * top);
}

double SignedMeasureOnGrid::pair(const Observable& f) const {
  double s = 0.0;
  for (const auto& [state, weight] : atoms) s += weight * (state < f.size() ? f(state) : f.tail_value());
  return s;
}

double SignedMeasureOnGrid::total_variation() const {
  double s = 0.0;
  for (const auto& [state, weight] : atoms) s += std::abs(weight);
  return s;
}

double rate_measure_lower_bound(const SignedMeasureOnGrid& nu, std::span<const double> pi,
                                const TruncatedKernel& p, std::span<const Observable> observables) {
  const Matrix q = q_matrix(pi, p, observables);
  std::vector<double> y(observables.size());
  for (std::size_t l = 0; l < observables.size(); ++l) y[l] = nu.pair(observables[l]);
  return rate_md(y, q);
}

RateModel build_rate_model(const TruncatedKernel& p, std::vector<Observable> observables,
                           double psd_tolerance) {
  RateModel model{stationary(p), p, std::move(observables), Matrix(), {}, {}, psd_tolerance};
  for (const auto& f : model.observables) {
    model.forms.push_back(theta_forms(model.pi.pi, p, f));
    model.theta_diag.push_back(theta(model.pi.pi, p, f));
  }
  model.q = q_matrix(model.pi.pi, p, model.observables, psd_tolerance);
  return model;
}

}  // namespace nhmc
