#include "nhmc/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "nhmc/ergodicity.hpp"
#include "nhmc/errors.hpp"
#include "nhmc/fit.hpp"
#include "nhmc/rate.hpp"

namespace nhmc {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// --------------------------------------------------------------------------
// JSON helpers; every type or range problem becomes InvalidModel.

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw InvalidModel(where + ": missing field '" + key + "'");
  return obj.at(key);
}

double get_double(const json& v, const std::string& what) {
  if (!v.is_number()) throw InvalidModel(what + " must be a number");
  return v.get<double>();
}

std::size_t get_count(const json& v, const std::string& what) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == std::floor(d) && d < 1e18) return static_cast<std::size_t>(d);
  }
  throw InvalidModel(what + " must be a nonnegative integer");
}

std::vector<double> get_doubles(const json& v, const std::string& what) {
  if (!v.is_array()) throw InvalidModel(what + " must be an array");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(get_double(e, what));
  return out;
}

std::vector<std::size_t> get_counts(const json& v, const std::string& what) {
  if (!v.is_array()) throw InvalidModel(what + " must be an array");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(get_count(e, what));
  return out;
}

Matrix get_matrix(const json& v, const std::string& what) {
  if (!v.is_array() || v.empty()) throw InvalidModel(what + " must be a nonempty array of rows");
  std::vector<std::vector<double>> rows;
  for (const auto& r : v) rows.push_back(get_doubles(r, what));
  for (const auto& r : rows)
    if (r.size() != rows.size()) throw InvalidModel(what + " must be square");
  return Matrix::from_rows(rows);
}

void check_increasing(const std::vector<std::size_t>& grid, const std::string& what) {
  if (grid.empty()) throw InvalidModel(what + " must be nonempty");
  if (grid.front() == 0) throw InvalidModel(what + " entries must be >= 1");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) throw InvalidModel(what + " must be strictly increasing");
}

std::size_t state_index(const json& v, std::size_t n_states, const std::string& what) {
  const std::size_t s = get_count(v, what);
  if (s < 1 || s > n_states) throw InvalidModel(what + " must be a state in 1.." + std::to_string(n_states));
  return s - 1;
}

TailPolicy policy_of(const json& spec) {
  if (!spec.contains("tail_policy")) return TailPolicy::LumpToLast;
  if (!spec.at("tail_policy").is_string()) throw InvalidModel("tail_policy must be a string");
  return tail_policy_from_string(spec.at("tail_policy").get<std::string>());
}

// --------------------------------------------------------------------------
// Output helpers.

class CsvWriter {
 public:
  explicit CsvWriter(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void header(std::initializer_list<const char*> cols) {
    bool first = true;
    for (const char* c : cols) {
      if (!first) out_ << ',';
      out_ << c;
      first = false;
    }
    out_ << '\n';
  }
  CsvWriter& cell(const std::string& v) {
    if (!first_) out_ << ',';
    out_ << v;
    first_ = false;
    return *this;
  }
  CsvWriter& cell(double v) { return cell(format_double(v)); }
  CsvWriter& cell(std::size_t v) { return cell(std::to_string(v)); }
  void end() {
    out_ << '\n';
    first_ = true;
  }

 private:
  std::ofstream out_;
  bool first_ = true;
};

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Log-log line plot of several series.
void write_loglog_svg(const fs::path& path, const std::vector<std::string>& names,
                      const std::vector<std::vector<std::size_t>>& xs, const std::vector<std::vector<double>>& ys) {
  const double w = 640, h = 420, pad = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (std::size_t s = 0; s < xs.size(); ++s)
    for (std::size_t i = 0; i < xs[s].size(); ++i) {
      if (!(ys[s][i] > 0.0)) continue;
      x0 = std::min(x0, std::log10(static_cast<double>(xs[s][i])));
      x1 = std::max(x1, std::log10(static_cast<double>(xs[s][i])));
      y0 = std::min(y0, std::log10(ys[s][i]));
      y1 = std::max(y1, std::log10(ys[s][i]));
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ofstream out(path, std::ios::binary);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect x=\"" << pad << "\" y=\"" << pad / 2 << "\" width=\"" << w - 1.5 * pad << "\" height=\""
      << h - 1.5 * pad << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (std::size_t s = 0; s < xs.size(); ++s) {
    out << "<polyline fill=\"none\" stroke=\"" << colors[s % 4] << "\" points=\"";
    for (std::size_t i = 0; i < xs[s].size(); ++i) {
      if (!(ys[s][i] > 0.0)) continue;
      const double px = pad + (std::log10(static_cast<double>(xs[s][i])) - x0) / (x1 - x0) * (w - 1.5 * pad);
      const double py = pad / 2 + (y1 - std::log10(ys[s][i])) / (y1 - y0) * (h - 1.5 * pad);
      out << px << ',' << py << ' ';
    }
    out << "\"/>\n";
    out << "<text x=\"" << pad + 10 << "\" y=\"" << pad + 16 * (s + 1) << "\" fill=\"" << colors[s % 4]
        << "\" font-size=\"12\">" << names[s] << "</text>\n";
  }
  out << "<text x=\"" << w / 2 << "\" y=\"" << h - 8 << "\" font-size=\"12\">log10 n</text>\n";
  out << "</svg>\n";
}

bool strictly_decreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

double theta_or_throw(const TruncatedKernel& p, const StationaryVector& pi, const Observable& f,
                      const std::string& name) {
  const double t = theta(pi.pi, p, f);
  if (!(t > 1e-12))
    throw HypothesisViolation("theta(" + name + ") = " + format_double(t) +
                              " is not positive; the CLT and MDP statements need theta(f) > 0");
  return t;
}

const Observable& first_observable(const ExperimentConfig& c) {
  if (c.observables.empty()) throw InvalidModel("this command needs at least one observable");
  return c.observables.front();
}

// --------------------------------------------------------------------------
// Commands. Each returns the summary and appends written file names.

json cmd_validate(const ExperimentConfig& c, std::vector<fs::path>& files, int& exit_code) {
  const fs::path dir = c.output_dir;
  CsvWriter csv(dir / "validate.csv");
  csv.header({"k", "min_entry", "max_row_sum_error", "truncated_mass"});
  double worst_entry = 1.0, worst_sum = 0.0, worst_tail = 0.0;
  std::string failure;
  for (std::size_t k : c.validate_k) {
    if (k == 0) throw InvalidModel("validate k values start at 1");
    const StepKernel step = c.family.step(k);
    double min_entry = 1.0, row_err = 0.0;
    for (std::size_t i = 0; i < step.size(); ++i) {
      const RowView r = step.row(i);
      double s = r.tail();
      for (std::size_t j = 0; j < step.size(); ++j) {
        const double v = r.at(j);
        min_entry = std::min(min_entry, v);
        s += v;
      }
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
    const double tail = c.family.truncated_mass(k);
    csv.cell(k).cell(min_entry).cell(row_err).cell(tail).end();
    worst_entry = std::min(worst_entry, min_entry);
    worst_sum = std::max(worst_sum, row_err);
    worst_tail = std::max(worst_tail, tail);
    if (failure.empty() && min_entry < -kEntryTolerance) failure = "negative entry at k=" + std::to_string(k);
    if (failure.empty() && row_err > kRowSumTolerance) failure = "row mass off by more than 1e-12 at k=" + std::to_string(k);
  }
  files.emplace_back("validate.csv");
  exit_code = failure.empty() ? 0 : 2;
  json summary;
  summary["status"] = failure.empty() ? "PASS" : "FAIL";
  if (!failure.empty()) summary["failure"] = failure;
  summary["family"] = to_string(c.family.kind());
  summary["N"] = c.family.size();
  summary["tail_policy"] = to_string(c.family.tail_policy());
  summary["k_checked"] = c.validate_k;
  summary["min_entry"] = worst_entry;
  summary["max_row_sum_error"] = worst_sum;
  summary["max_tail_mass"] = worst_tail;
  return summary;
}

json cmd_conditions(const ExperimentConfig& c, const RunOptions& opt, std::vector<fs::path>& files) {
  const fs::path dir = c.output_dir;
  std::vector<ConditionProfile> profiles;
  profiles.push_back(condition_profile(c.family, Condition::Cesaro, c.cesaro_n_grid, c.cesaro_m_sup_range, opt.workers));
  profiles.push_back(condition_profile(c.family, Condition::AverageDiff, c.n_grid, c.m_sup_range, opt.workers));
  profiles.push_back(condition_profile(c.family, Condition::DeltaSum, c.n_grid, 0, opt.workers));

  CsvWriter csv(dir / "conditions.csv");
  csv.header({"condition_id", "n", "m_sup_range", "value"});
  json summary;
  summary["family"] = to_string(c.family.kind());
  summary["N"] = c.family.size();
  json per = json::object();
  for (const auto& p : profiles) {
    for (std::size_t i = 0; i < p.n_grid.size(); ++i)
      csv.cell(to_string(p.condition)).cell(p.n_grid[i]).cell(p.m_sup_range).cell(p.values[i]).end();
    json s;
    s["n_grid"] = p.n_grid;
    s["values"] = p.values;
    s["argmax_m"] = p.argmax_m;
    s["m_sup_range"] = p.m_sup_range;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < p.n_grid.size(); ++i)
      if (p.values[i] > 0.0) {
        xs.push_back(static_cast<double>(p.n_grid[i]));
        ys.push_back(p.values[i]);
      }
    s["loglog_slope"] = xs.size() >= 2 ? json(loglog_slope(xs, ys)) : json(nullptr);
    s["all_zero"] = std::all_of(p.values.begin(), p.values.end(), [](double v) { return v == 0.0; });
    const std::size_t tail_from = p.values.size() >= 2 ? p.values.size() - 2 : 0;
    s["decreasing_at_end"] = strictly_decreasing({p.values.begin() + static_cast<std::ptrdiff_t>(tail_from), p.values.end()});
    per[to_string(p.condition)] = s;
  }
  summary["conditions"] = per;
  files.emplace_back("conditions.csv");
  if (opt.svg) {
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> xs;
    std::vector<std::vector<double>> ys;
    for (const auto& p : profiles) {
      names.push_back(to_string(p.condition));
      xs.push_back(p.n_grid);
      ys.push_back(p.values);
    }
    write_loglog_svg(dir / "conditions.svg", names, xs, ys);
    files.emplace_back("conditions.svg");
  }
  return summary;
}

json cmd_rate(const ExperimentConfig& c, std::vector<fs::path>& files) {
  const fs::path dir = c.output_dir;
  if (c.observables.empty()) throw InvalidModel("rate needs at least one observable");
  const RateModel model = build_rate_model(c.family.limit(), c.observables);
  for (std::size_t l = 0; l < model.theta_diag.size(); ++l)
    if (!(model.theta_diag[l] > 1e-12))
      throw HypothesisViolation("theta(" + c.observable_names[l] + ") = " + format_double(model.theta_diag[l]) +
                                " is not positive; the rate function needs theta(f) > 0");
  json doc;
  doc["observables"] = c.observable_names;
  doc["theta"] = model.theta_diag;
  json q = json::array();
  for (std::size_t a = 0; a < model.q.rows(); ++a) {
    std::vector<double> row(model.q.row(a).begin(), model.q.row(a).end());
    q.push_back(row);
  }
  doc["Q"] = q;
  doc["pi_residual"] = model.pi.residual;
  doc["q_rank"] = numerical_rank(model.q);
  doc["q_eigenvalues"] = eigenvalues(model.q);
  json forms = json::array();
  for (const auto& f : model.forms)
    forms.push_back({{"variance_gap", f.variance_gap}, {"conditional_variance", f.conditional_variance}});
  doc["theta_forms"] = forms;
  doc["stationary_iterations"] = model.pi.iterations;
  doc["stationary_linear_solve"] = model.pi.used_linear_solve;
  write_json(dir / "rate_model.json", doc);
  files.emplace_back("rate_model.json");

  CsvWriter csv(dir / "rate_table.csv");
  csv.header({"observable", "x", "rate"});
  for (std::size_t l = 0; l < model.theta_diag.size(); ++l)
    for (double x : c.x_grid) csv.cell(c.observable_names[l]).cell(x).cell(rate_1d(x, model.theta_diag[l])).end();
  files.emplace_back("rate_table.csv");

  json summary;
  summary["theta"] = model.theta_diag;
  summary["q_rank"] = numerical_rank(model.q);
  summary["pi_residual"] = model.pi.residual;
  return summary;
}

json cmd_clt(const ExperimentConfig& c, const RunOptions& opt, std::vector<fs::path>& files) {
  const fs::path dir = c.output_dir;
  const Observable& f = first_observable(c);
  const StationaryVector pi = stationary(c.family.limit());
  const double th = theta_or_throw(c.family.limit(), pi, f, c.observable_names.front());
  const Observable fs_[1] = {f};
  const SumSamples samples =
      simulate_partial_sums(c.initial, c.family, fs_, c.n_grid, c.trials, c.base_seed, opt.workers);
  const auto ev = expected_values(c.initial, c.family, f, c.n_grid.back());
  std::vector<double> prefix(ev.size() + 1, 0.0);
  for (std::size_t k = 0; k < ev.size(); ++k) prefix[k + 1] = prefix[k] + ev[k];

  CsvWriter raw(dir / "clt_samples.csv");
  raw.header({"n", "trial", "s_n", "standardized"});
  CsvWriter table(dir / "clt.csv");
  table.header({"n", "trials", "expected_sum", "theta", "ks_statistic", "variance_ratio"});
  json rows = json::array();
  bool all_pass = true;
  for (std::size_t h = 0; h < c.n_grid.size(); ++h) {
    const std::size_t n = c.n_grid[h];
    const auto col = samples.column(h, 0);
    const double scale = std::sqrt(static_cast<double>(n) * th);
    for (std::size_t t = 0; t < col.size(); ++t)
      raw.cell(n).cell(t).cell(col[t]).cell((col[t] - prefix[n]) / scale).end();
    const CltDiagnostic d = clt_diagnostic(col, prefix[n], th, n);
    table.cell(n).cell(c.trials).cell(prefix[n]).cell(th).cell(d.ks_statistic).cell(d.variance_ratio).end();
    const bool pass = d.ks_statistic <= 0.03 && d.variance_ratio >= 0.9 && d.variance_ratio <= 1.1;
    all_pass = all_pass && pass;
    rows.push_back({{"n", n},
                    {"expected_sum", prefix[n]},
                    {"ks_statistic", d.ks_statistic},
                    {"variance_ratio", d.variance_ratio},
                    {"pass", pass}});
  }
  files.emplace_back("clt_samples.csv");
  files.emplace_back("clt.csv");
  json summary;
  summary["theta"] = th;
  summary["trials"] = c.trials;
  summary["thresholds"] = {{"ks_statistic_max", 0.03}, {"variance_ratio_range", {0.9, 1.1}}};
  summary["results"] = rows;
  summary["pass"] = all_pass;
  return summary;
}

json cmd_mdp(const ExperimentConfig& c, const RunOptions& opt, std::vector<fs::path>& files) {
  const fs::path dir = c.output_dir;
  const Observable& f = first_observable(c);
  const StationaryVector pi = stationary(c.family.limit());
  const double th = theta_or_throw(c.family.limit(), pi, f, c.observable_names.front());
  if (c.x_grid.empty()) throw InvalidModel("mdp needs a nonempty x_grid");
  const SpeedFunction speed(c.speed_beta);
  MdpOptions mo;
  mo.method = c.mdp_method;
  mo.dp.max_entries = c.dp_budget;
  mo.trials = c.mdp_trials;
  mo.base_seed = c.base_seed;
  mo.workers = opt.workers;
  const auto est = mdp_diagnostic(c.family, c.initial, f, speed, c.x_grid, c.n_grid, th, mo);

  CsvWriter csv(dir / "mdp.csv");
  csv.header({"n", "x", "method", "probability", "log_prob", "scaled", "target", "std_error", "zero_hits", "trials"});
  for (const auto& e : est) {
    csv.cell(e.n).cell(e.x).cell(to_string(e.method)).cell(e.probability).cell(e.log_prob).cell(e.scaled)
        .cell(e.target).cell(e.std_error ? format_double(*e.std_error) : std::string("")).cell(e.zero_hits ? "1" : "0")
        .cell(e.trials).end();
  }
  files.emplace_back("mdp.csv");

  json trends = json::array();
  const std::size_t nx = c.x_grid.size();
  for (std::size_t xi = 0; xi < nx; ++xi) {
    std::vector<double> gap;
    std::vector<double> scaled;
    for (std::size_t h = 0; h < c.n_grid.size(); ++h) {
      const auto& e = est[h * nx + xi];
      scaled.push_back(e.scaled);
      gap.push_back(std::abs(e.scaled - e.target));
    }
    const auto& last = est[(c.n_grid.size() - 1) * nx + xi];
    const double rel = last.target != 0.0 ? std::abs(last.scaled - last.target) / std::abs(last.target)
                                          : std::abs(last.scaled);
    trends.push_back({{"x", c.x_grid[xi]},
                      {"scaled", scaled},
                      {"target", last.target},
                      {"monotone_approach", strictly_decreasing(gap)},
                      {"final_relative_error", finite_or_null(rel)},
                      {"final_within_30_percent", rel <= 0.3}});
  }
  // Tails thin out as |x| grows at fixed n.
  bool antitone = true;
  for (std::size_t h = 0; h < c.n_grid.size(); ++h)
    for (std::size_t a = 0; a < nx; ++a)
      for (std::size_t b = 0; b < nx; ++b) {
        const auto& ea = est[h * nx + a];
        const auto& eb = est[h * nx + b];
        if ((ea.x >= 0) == (eb.x >= 0) && std::abs(ea.x) < std::abs(eb.x) && eb.scaled > ea.scaled + 1e-12)
          antitone = false;
      }
  json summary;
  summary["theta"] = th;
  summary["speed_beta"] = c.speed_beta;
  summary["method"] = est.empty() ? "none" : to_string(est.front().method);
  summary["trends"] = trends;
  summary["antitone_in_abs_x"] = antitone;

  if (c.observables.size() >= 2) {
    // Half-space {y_1 >= x} for the vector of centered sums, against the
    // infimum of the multivariate rate over that half-space.
    const RateModel model = build_rate_model(c.family.limit(), c.observables);
    const std::size_t trials = c.mdp_trials > 0 ? c.mdp_trials : c.trials;
    const SumSamples s =
        simulate_partial_sums(c.initial, c.family, c.observables, c.n_grid, trials, c.base_seed, opt.workers);
    const auto ev = expected_values(c.initial, c.family, c.observables.front(), c.n_grid.back());
    std::vector<double> prefix(ev.size() + 1, 0.0);
    for (std::size_t k = 0; k < ev.size(); ++k) prefix[k + 1] = prefix[k] + ev[k];
    std::vector<double> w(c.observables.size(), 0.0);
    w[0] = 1.0;
    CsvWriter hs(dir / "mdp_halfspace.csv");
    hs.header({"n", "x", "probability", "scaled", "target", "trials"});
    for (std::size_t h = 0; h < c.n_grid.size(); ++h) {
      const std::size_t n = c.n_grid[h];
      const double a = speed(static_cast<double>(n));
      for (double x : c.x_grid) {
        if (x <= 0.0) continue;
        std::size_t hits = 0;
        for (std::size_t t = 0; t < trials; ++t) hits += (s.at(h, t, 0) - prefix[n]) / a >= x;
        const double p = static_cast<double>(hits) / static_cast<double>(trials);
        const double scaled = static_cast<double>(n) / (a * a) * std::log(p);
        hs.cell(n).cell(x).cell(p).cell(scaled).cell(-halfspace_infimum(w, x, model.q)).cell(trials).end();
      }
    }
    files.emplace_back("mdp_halfspace.csv");
  }
  return summary;
}

json cmd_martingale(const ExperimentConfig& c, const RunOptions& opt, std::vector<fs::path>& files) {
  const fs::path dir = c.output_dir;
  if (c.observables.empty()) throw InvalidModel("martingale needs at least one observable");
  std::vector<double> z = c.z;
  if (z.empty()) z.assign(c.observables.size(), 1.0);
  if (z.size() != c.observables.size()) throw InvalidModel("martingale.z needs one weight per observable");
  const MartingaleCheck mc =
      martingale_check(c.family, c.initial, c.observables, z, c.n_grid, c.trials, c.base_seed, opt.workers);
  const StationaryVector pi = stationary(c.family.limit());
  const Observable g = linear_combination(c.observables, z);
  const double th = theta(pi.pi, c.family.limit(), g);

  CsvWriter csv(dir / "martingale.csv");
  csv.header({"n", "drift", "variance", "theta_g"});
  for (std::size_t i = 0; i < mc.n_grid.size(); ++i)
    csv.cell(mc.n_grid[i]).cell(mc.drift_values[i]).cell(mc.variance_values[i]).cell(th).end();
  files.emplace_back("martingale.csv");

  json summary;
  summary["theta_g"] = th;
  summary["z"] = z;
  summary["identity_residual"] = mc.identity_residual;
  summary["identity_pass"] = mc.identity_residual <= 1e-10;
  summary["final_variance_gap"] = std::abs(mc.variance_values.back() - th);
  summary["variance_pass"] = std::abs(mc.variance_values.back() - th) <= 0.01;
  summary["drift_decreasing"] = strictly_decreasing(mc.drift_values);
  summary["final_drift"] = mc.drift_values.back();
  summary["drift_pass"] = strictly_decreasing(mc.drift_values) && mc.drift_values.back() <= 0.02;
  return summary;
}

void update_manifest(const ExperimentConfig& c, const std::string& command, const std::vector<fs::path>& files,
                     double seconds, const RunOptions& opt) {
  const fs::path path = c.output_dir / "manifest.json";
  json manifest;
  if (fs::exists(path)) {
    std::ifstream in(path);
    manifest = json::parse(in, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) manifest = json::object();
  }
  manifest["library_version"] = kLibraryVersion;
  json stage;
  stage["config"] = c.source;
  stage["initial_distribution"] = c.source.contains("initial") ? c.source.at("initial") : json{{"kind", "point_mass"}, {"state", 1}};
  stage["workers"] = opt.workers;
  stage["wall_clock_seconds"] = seconds;
  json sums = json::object();
  for (const auto& f : files) sums[f.generic_string()] = sha256_hex(c.output_dir / f);
  stage["files"] = sums;
  manifest["stages"][command] = stage;
  write_json(path, manifest);
}

}  // namespace

// --------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string sha256_hex(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

KernelFamily family_from_json(const json& spec) {
  const std::string where = "family";
  const json& kind_v = require(spec, "kind", where);
  if (!kind_v.is_string()) throw InvalidModel("family.kind must be a string");
  const std::string kind = kind_v.get<std::string>();
  const TailPolicy policy = policy_of(spec);
  auto n_states = [&] { return spec.contains("N") ? get_count(spec.at("N"), "family.N") : std::size_t{1000}; };
  if (kind == "example1")
    return KernelFamily::example1(get_double(require(spec, "alpha", where), "family.alpha"), n_states(), policy);
  if (kind == "example2")
    return KernelFamily::example2(get_double(require(spec, "alpha", where), "family.alpha"),
                                  get_double(require(spec, "beta", where), "family.beta"), n_states(), policy);
  if (kind == "example1_limit")
    return KernelFamily::constant(make_limit_kernel(KernelFamily::Kind::Example1, 1.0, 0.0, n_states(), policy), policy);
  if (kind == "example2_limit")
    return KernelFamily::constant(make_limit_kernel(KernelFamily::Kind::Example2, 1.0, 1.0, n_states(), policy), policy);
  if (kind == "constant")
    return KernelFamily::constant(TruncatedKernel(get_matrix(require(spec, "rows", where), "family.rows")), policy);
  if (kind == "table") {
    const json& ks = require(spec, "kernels", where);
    if (!ks.is_array() || ks.empty()) throw InvalidModel("family.kernels must be a nonempty array");
    std::vector<TruncatedKernel> kernels;
    for (const auto& k : ks) kernels.emplace_back(get_matrix(k, "family.kernels[]"));
    std::optional<TruncatedKernel> limit;
    if (spec.contains("limit")) limit.emplace(get_matrix(spec.at("limit"), "family.limit"));
    return KernelFamily::table(std::move(kernels), std::move(limit), policy);
  }
  throw InvalidModel("unknown family kind '" + kind + "'");
}

InitialDistribution initial_from_json(const json& spec, std::size_t n_states) {
  const json& kind_v = require(spec, "kind", "initial");
  if (!kind_v.is_string()) throw InvalidModel("initial.kind must be a string");
  const std::string kind = kind_v.get<std::string>();
  if (kind == "point_mass") return InitialDistribution::point_mass(n_states, state_index(require(spec, "state", "initial"), n_states, "initial.state"));
  if (kind == "uniform") return InitialDistribution::uniform(n_states);
  if (kind == "table") {
    auto probs = get_doubles(require(spec, "probs", "initial"), "initial.probs");
    if (probs.size() != n_states) throw InvalidModel("initial.probs must have N entries");
    const double tail = spec.contains("tail_mass") ? get_double(spec.at("tail_mass"), "initial.tail_mass") : 0.0;
    return InitialDistribution(std::move(probs), tail);
  }
  throw InvalidModel("unknown initial distribution kind '" + kind + "'");
}

Observable observable_from_json(const json& spec, std::size_t n_states, std::string* name) {
  const json& kind_v = require(spec, "kind", "observable");
  if (!kind_v.is_string()) throw InvalidModel("observable.kind must be a string");
  const std::string kind = kind_v.get<std::string>();
  std::string label;
  std::optional<Observable> out;
  if (kind == "indicator") {
    const std::size_t s = state_index(require(spec, "state", "observable"), n_states, "observable.state");
    out = Observable::indicator(n_states, s);
    label = "indicator(" + std::to_string(s + 1) + ")";
  } else if (kind == "capped_identity") {
    const double cap = get_double(require(spec, "cap", "observable"), "observable.cap");
    if (!(cap >= 1.0)) throw InvalidModel("observable.cap must be >= 1");
    out = Observable::capped_identity(n_states, cap);
    label = "capped_identity(" + format_double(cap) + ")";
  } else if (kind == "constant") {
    const double v = get_double(require(spec, "value", "observable"), "observable.value");
    out = Observable::constant(n_states, v);
    label = "constant(" + format_double(v) + ")";
  } else if (kind == "table") {
    auto values = get_doubles(require(spec, "values", "observable"), "observable.values");
    if (values.size() != n_states) throw InvalidModel("observable.values must have N entries");
    const double tail = spec.contains("tail_value") ? get_double(spec.at("tail_value"), "observable.tail_value") : 0.0;
    out.emplace(std::move(values), tail);
    label = "table";
  } else {
    throw InvalidModel("unknown observable kind '" + kind + "'");
  }
  if (spec.contains("name")) {
    if (!spec.at("name").is_string()) throw InvalidModel("observable.name must be a string");
    label = spec.at("name").get<std::string>();
  }
  if (name != nullptr) *name = label;
  return *out;
}

ExperimentConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw InvalidModel("config must be a JSON object");
  const json& ver = require(doc, "schema_version", "config");
  if (!ver.is_number_integer() || ver.get<int>() != kSchemaVersion)
    throw InvalidModel("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  ExperimentConfig c;
  c.source = doc;
  c.family = family_from_json(require(doc, "family", "config"));
  const std::size_t n_states = c.family.size();
  c.initial = doc.contains("initial") ? initial_from_json(doc.at("initial"), n_states)
                                      : InitialDistribution::point_mass(n_states, 0);
  if (doc.contains("observables")) {
    const json& obs = doc.at("observables");
    if (!obs.is_array()) throw InvalidModel("observables must be an array");
    for (const auto& o : obs) {
      std::string name;
      c.observables.push_back(observable_from_json(o, n_states, &name));
      c.observable_names.push_back(name);
    }
  } else {
    c.observables.push_back(Observable::indicator(n_states, 0));
    c.observable_names.emplace_back("indicator(1)");
  }
  if (doc.contains("speed_beta")) c.speed_beta = get_double(doc.at("speed_beta"), "speed_beta");
  SpeedFunction check(c.speed_beta);
  c.n_grid = doc.contains("n_grid") ? get_counts(doc.at("n_grid"), "n_grid")
                                    : std::vector<std::size_t>{10, 100, 1000, 10000};
  check_increasing(c.n_grid, "n_grid");
  c.x_grid = doc.contains("x_grid") ? get_doubles(doc.at("x_grid"), "x_grid") : std::vector<double>{0.0, 0.2, 0.4};
  if (doc.contains("trials")) c.trials = get_count(doc.at("trials"), "trials");
  if (c.trials == 0) throw InvalidModel("trials must be >= 1");
  if (doc.contains("base_seed")) c.base_seed = get_count(doc.at("base_seed"), "base_seed");
  if (doc.contains("output_dir")) {
    if (!doc.at("output_dir").is_string()) throw InvalidModel("output_dir must be a string");
    c.output_dir = doc.at("output_dir").get<std::string>();
  }
  if (doc.contains("validate")) {
    const json& v = doc.at("validate");
    if (v.contains("k")) c.validate_k = get_counts(v.at("k"), "validate.k");
  }
  if (doc.contains("conditions")) {
    const json& v = doc.at("conditions");
    if (v.contains("m_sup_range")) c.m_sup_range = get_count(v.at("m_sup_range"), "conditions.m_sup_range");
    if (v.contains("cesaro_n_grid")) c.cesaro_n_grid = get_counts(v.at("cesaro_n_grid"), "conditions.cesaro_n_grid");
    if (v.contains("cesaro_m_sup_range"))
      c.cesaro_m_sup_range = get_count(v.at("cesaro_m_sup_range"), "conditions.cesaro_m_sup_range");
  }
  if (c.cesaro_n_grid.empty()) {
    for (std::size_t n : c.n_grid)
      if (n <= 100) c.cesaro_n_grid.push_back(n);
    if (c.cesaro_n_grid.empty()) c.cesaro_n_grid = {10, 100};
  }
  check_increasing(c.cesaro_n_grid, "conditions.cesaro_n_grid");
  if (doc.contains("mdp")) {
    const json& v = doc.at("mdp");
    if (v.contains("method")) {
      if (!v.at("method").is_string()) throw InvalidModel("mdp.method must be a string");
      c.mdp_method = mdp_method_from_string(v.at("method").get<std::string>());
    }
    if (v.contains("trials")) c.mdp_trials = get_count(v.at("trials"), "mdp.trials");
    if (v.contains("dp_budget")) c.dp_budget = get_double(v.at("dp_budget"), "mdp.dp_budget");
  }
  if (doc.contains("martingale")) {
    const json& v = doc.at("martingale");
    if (v.contains("z")) c.z = get_doubles(v.at("z"), "martingale.z");
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidModel("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidModel("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

RunResult run_command(const std::string& command, const ExperimentConfig& config, const RunOptions& options,
                      std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(config.output_dir);
  RunResult result;
  if (command == "validate") result.summary = cmd_validate(config, result.files, result.exit_code);
  else if (command == "conditions") result.summary = cmd_conditions(config, options, result.files);
  else if (command == "rate") result.summary = cmd_rate(config, result.files);
  else if (command == "clt") result.summary = cmd_clt(config, options, result.files);
  else if (command == "mdp") result.summary = cmd_mdp(config, options, result.files);
  else if (command == "martingale") result.summary = cmd_martingale(config, options, result.files);
  else throw InvalidModel("unknown command '" + command + "'");

  const std::string summary_name = command + "_summary.json";
  write_json(config.output_dir / summary_name, result.summary);
  result.files.emplace_back(summary_name);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  update_manifest(config, command, result.files, seconds, options);
  log << command << ": wrote";
  for (const auto& f : result.files) log << ' ' << f.generic_string();
  log << " to " << config.output_dir.string() << '\n';
  return result;
}

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const InvalidModel*>(&error) != nullptr) return 2;
  if (dynamic_cast<const NotIrreducible*>(&error) != nullptr) return 2;
  if (dynamic_cast<const HypothesisViolation*>(&error) != nullptr) return 3;
  if (dynamic_cast<const BudgetExceeded*>(&error) != nullptr) return 4;
  return 1;
}

}  // namespace nhmc
