#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisco/common.hpp"
#include "lisco/kkt.hpp"
#include "lisco/lisco.hpp"
#include "lisco/nn.hpp"
#include "lisco/oracle.hpp"
#include "lisco/problems.hpp"
#include "lisco/training.hpp"

namespace lisco {

// ---------------------------------------------------------------------------
// Configuration.

struct InstanceSpec {
  std::optional<std::string> path;  // load instead of generating when set
  ProblemKind kind = ProblemKind::ConvexQp;
  Index n_y = 20;
  Index n_h = 10;
  Index n_g = 10;
  std::uint64_t seed = 1;
};

enum class Precision { Double, Single };

struct ExperimentConfig {
  InstanceSpec instance;
  /// Generated instances use seeds instance.seed, instance.seed + 1, ...
  /// A loaded instance (instance.path) always runs alone.
  Index n_instances = 3;
  Index n_test = 200;
  std::uint64_t test_seed = 1000;
  PredictorTrainConfig predictor;
  SolverTrainConfig solver;  // use_predictor is set per variant
  SolveOptions solve;
  NewtonOptions newton;
  bool with_predictor = true;
  bool without_predictor = true;
  double success_tol = 1e-8;  // on T
  std::vector<double> tolerances{1e-6, 1e-8};
  std::vector<long> checkpoints{10, 20, 50, 100, 500};
  Precision precision = Precision::Double;
  std::string out_dir = "out";

  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.predictor.seed = 11;
    c.solver.seed = 22;
    return c;
  }

  static ExperimentConfig paper() {
    ExperimentConfig c = desk();
    c.instance.n_y = 100;
    c.instance.n_h = 50;
    c.instance.n_g = 50;
    c.n_instances = 5;
    c.n_test = 1000;
    const auto pseed = c.predictor.seed, sseed = c.solver.seed;
    c.predictor = PredictorTrainConfig::paper();
    c.solver = SolverTrainConfig::paper();
    c.predictor.seed = pseed;
    c.solver.seed = sseed;
    return c;
  }

  void validate() const {
    if (n_test <= 0) throw ValidationError("experiment: n_test must be positive");
    if (n_instances <= 0) throw ValidationError("experiment: n_instances must be positive");
    if (!instance.path && !(instance.n_h > 0 && instance.n_h <= instance.n_y && instance.n_g > 0))
      throw ValidationError("experiment: instance requires 0 < n_h <= n_y and n_g > 0");
    if (tolerances.empty() || checkpoints.empty())
      throw ValidationError("experiment: tolerances and checkpoints must be non-empty");
    for (size_t i = 0; i < tolerances.size(); ++i) {
      if (!(tolerances[i] > 0)) throw ValidationError("experiment: tolerances must be positive");
      if (i > 0 && !(tolerances[i] < tolerances[i - 1]))
        throw ValidationError("experiment: tolerances must be strictly descending");
    }
    for (size_t i = 0; i < checkpoints.size(); ++i) {
      if (checkpoints[i] < 0) throw ValidationError("experiment: checkpoints must be >= 0");
      if (i > 0 && !(checkpoints[i] > checkpoints[i - 1]))
        throw ValidationError("experiment: checkpoints must be strictly ascending");
    }
    if (!(success_tol > 0)) throw ValidationError("experiment: success_tol must be positive");
    if (!with_predictor && !without_predictor)
      throw ValidationError("experiment: enable at least one solver variant");
    predictor.validate();
    solver.validate();
    solve.validate();
    newton.validate();
  }
};

inline nlohmann::json to_json(const SolveOptions& o) {
  return {{"n_max", o.n_max},
          {"tau", o.tau},
          {"alpha0", o.alpha0},
          {"omega", o.omega},
          {"beta", o.beta},
          {"metric", o.metric == TerminationMetric::Norm ? "norm" : "squared_norm"},
          {"fb_eps", o.fb_eps},
          {"seed", o.seed}};
}

inline SolveOptions solve_options_from_json(const nlohmann::json& j, SolveOptions base = {}) {
  try {
    detail::read_opt(j, "n_max", base.n_max);
    detail::read_opt(j, "tau", base.tau);
    detail::read_opt(j, "alpha0", base.alpha0);
    detail::read_opt(j, "omega", base.omega);
    detail::read_opt(j, "beta", base.beta);
    detail::read_opt(j, "fb_eps", base.fb_eps);
    detail::read_opt(j, "seed", base.seed);
    if (j.contains("metric")) {
      const auto m = j["metric"].get<std::string>();
      if (m == "norm") base.metric = TerminationMetric::Norm;
      else if (m == "squared_norm") base.metric = TerminationMetric::SquaredNorm;
      else throw ValidationError("solve options: unknown metric '" + m + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("solve options: ") + e.what());
  }
  base.validate();
  return base;
}

inline nlohmann::json to_json(const NewtonOptions& o) {
  return {{"max_iters", o.max_iters},         {"tol", o.tol},
          {"armijo_c", o.armijo_c},           {"backtrack_factor", o.backtrack_factor},
          {"min_step", o.min_step},           {"levenberg_mu0", o.levenberg_mu0},
          {"fb_eps", o.fb_eps}};
}

inline NewtonOptions newton_options_from_json(const nlohmann::json& j, NewtonOptions base = {}) {
  try {
    detail::read_opt(j, "max_iters", base.max_iters);
    detail::read_opt(j, "tol", base.tol);
    detail::read_opt(j, "armijo_c", base.armijo_c);
    detail::read_opt(j, "backtrack_factor", base.backtrack_factor);
    detail::read_opt(j, "min_step", base.min_step);
    detail::read_opt(j, "levenberg_mu0", base.levenberg_mu0);
    detail::read_opt(j, "fb_eps", base.fb_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("newton options: ") + e.what());
  }
  base.validate();
  return base;
}

/// Canonical JSON of a config. The output directory is not part of it.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json inst;
  if (c.instance.path) inst["path"] = *c.instance.path;
  inst["kind"] = std::string(to_string(c.instance.kind));
  inst["n_y"] = c.instance.n_y;
  inst["n_h"] = c.instance.n_h;
  inst["n_g"] = c.instance.n_g;
  inst["seed"] = c.instance.seed;
  return {{"instance", inst},
          {"n_instances", c.n_instances},
          {"n_test", c.n_test},
          {"test_seed", c.test_seed},
          {"predictor", to_json(c.predictor)},
          {"solver", to_json(c.solver)},
          {"solve", to_json(c.solve)},
          {"newton", to_json(c.newton)},
          {"with_predictor", c.with_predictor},
          {"without_predictor", c.without_predictor},
          {"success_tol", c.success_tol},
          {"tolerances", c.tolerances},
          {"checkpoints", c.checkpoints},
          {"precision", c.precision == Precision::Single ? "single" : "double"}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                                    ExperimentConfig base = ExperimentConfig::desk()) {
  try {
    if (j.contains("instance")) {
      const auto& ij = j["instance"];
      if (ij.contains("path") && !ij["path"].is_null()) base.instance.path = ij["path"].get<std::string>();
      if (ij.contains("kind")) base.instance.kind = parse_problem_kind(ij["kind"].get<std::string>());
      detail::read_opt(ij, "n_y", base.instance.n_y);
      detail::read_opt(ij, "n_h", base.instance.n_h);
      detail::read_opt(ij, "n_g", base.instance.n_g);
      detail::read_opt(ij, "seed", base.instance.seed);
    }
    detail::read_opt(j, "n_instances", base.n_instances);
    detail::read_opt(j, "n_test", base.n_test);
    detail::read_opt(j, "test_seed", base.test_seed);
    if (j.contains("predictor"))
      base.predictor = predictor_config_from_json(j["predictor"], base.predictor);
    if (j.contains("solver")) base.solver = solver_config_from_json(j["solver"], base.solver);
    if (j.contains("solve")) base.solve = solve_options_from_json(j["solve"], base.solve);
    if (j.contains("newton")) base.newton = newton_options_from_json(j["newton"], base.newton);
    detail::read_opt(j, "with_predictor", base.with_predictor);
    detail::read_opt(j, "without_predictor", base.without_predictor);
    detail::read_opt(j, "success_tol", base.success_tol);
    detail::read_opt(j, "tolerances", base.tolerances);
    detail::read_opt(j, "checkpoints", base.checkpoints);
    detail::read_opt(j, "out_dir", base.out_dir);
    if (j.contains("precision")) {
      const auto p = j["precision"].get<std::string>();
      if (p == "double") base.precision = Precision::Double;
      else if (p == "single") base.precision = Precision::Single;
      else throw ValidationError("experiment: unknown precision '" + p + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  base.validate();
  return base;
}

inline std::string config_hash(const ExperimentConfig& c) { return hash_hex(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Metrics.

/// Linear-interpolation percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * double(v.size() - 1);
  const size_t lo = size_t(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct MetricsSummary {
  std::string method;
  long n = 0;
  double max_eq_violation = 0;
  double mean_eq_violation = 0;
  double max_ineq_violation = 0;
  double mean_ineq_violation = 0;
  double max_gap_percent = 0;
  double mean_gap_percent = 0;
  long gap_undefined_count = 0;
  double t_median = 0;
  double t_p99 = 0;
  double t_max = 0;
  double t_min = 0;
  double success_rate = 0;
  long n_success = 0;
  // Iteration counts and wall times: over successful runs ("converged") and
  // over all runs ("all").
  double iterations_median_converged = 0;
  double iterations_max_converged = 0;
  double iterations_median_all = 0;
  double iterations_max_all = 0;
  double wall_median_converged = 0;
  double wall_max_converged = 0;
  double wall_median_all = 0;
  double wall_max_all = 0;
};

class MissingOracleEntry : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Per-run quantities entering the summary.
struct PointMetrics {
  double eq_violation = 0;    // ||A y - x||_inf
  double ineq_violation = 0;  // max(0, max_i (G y - h)_i)
  std::optional<double> gap_percent;
  double t = 0;
  long iterations = 0;
  double wall_time = 0;
};

/// `oracle` must hold a record for every row index of `x_batch`.
inline std::vector<PointMetrics> point_metrics(const ProblemInstance<double>& inst,
                                               const Matrix<double>& x_batch,
                                               const std::vector<SolveReport<double>>& reports,
                                               const std::vector<OracleRecord>& oracle) {
  require_dims(Index(reports.size()) == x_batch.rows(), "reports vs x batch");
  std::map<Index, const OracleRecord*> by_index;
  for (const auto& r : oracle) by_index[r.index] = &r;
  std::vector<PointMetrics> out;
  out.reserve(reports.size());
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto it = by_index.find(Index(i));
    if (it == by_index.end())
      throw MissingOracleEntry("missing oracle entry for x index " + std::to_string(i));
    const auto& rep = reports[i];
    const Vector<double> x = x_batch.row(Index(i)).transpose();
    const Vector<double> y = rep.z_final.head(inst.n_y);
    const auto c = constraints(inst, y, x);
    PointMetrics pm;
    pm.eq_violation = inst.n_h > 0 ? c.eq.cwiseAbs().maxCoeff() : 0.0;
    pm.ineq_violation = inst.n_g > 0 ? std::max(0.0, c.ineq.maxCoeff()) : 0.0;
    try {
      pm.gap_percent = optimality_gap(objective(inst, y, x), it->second->f);
    } catch (const UndefinedGap&) {
    }
    pm.t = rep.t_final;
    pm.iterations = rep.iterations;
    pm.wall_time = rep.wall_time;
    out.push_back(pm);
  }
  return out;
}

/// Success means the best T reached within the iteration budget is <= success_tol.
inline MetricsSummary summarize_metrics(const std::vector<PointMetrics>& points,
                                        double success_tol = 1e-8, std::string method = {}) {
  MetricsSummary m;
  m.method = std::move(method);
  m.n = long(points.size());
  if (points.empty()) return m;
  std::vector<double> ts, it_conv, it_all, wall_conv, wall_all;
  double sum_eq = 0, sum_ineq = 0, sum_gap = 0;
  long n_gap = 0;
  m.max_gap_percent = -std::numeric_limits<double>::infinity();
  for (const auto& p : points) {
    m.max_eq_violation = std::max(m.max_eq_violation, p.eq_violation);
    m.max_ineq_violation = std::max(m.max_ineq_violation, p.ineq_violation);
    sum_eq += p.eq_violation;
    sum_ineq += p.ineq_violation;
    if (p.gap_percent) {
      m.max_gap_percent = std::max(m.max_gap_percent, *p.gap_percent);
      sum_gap += *p.gap_percent;
      ++n_gap;
    } else {
      ++m.gap_undefined_count;
    }
    ts.push_back(p.t);
    it_all.push_back(double(p.iterations));
    wall_all.push_back(p.wall_time);
    if (p.t <= success_tol) {
      ++m.n_success;
      it_conv.push_back(double(p.iterations));
      wall_conv.push_back(p.wall_time);
    }
  }
  const double n = double(points.size());
  m.mean_eq_violation = sum_eq / n;
  m.mean_ineq_violation = sum_ineq / n;
  m.mean_gap_percent = n_gap > 0 ? sum_gap / double(n_gap) : 0.0;
  if (n_gap == 0) m.max_gap_percent = 0;
  m.t_median = percentile(ts, 50);
  m.t_p99 = percentile(ts, 99);
  m.t_max = *std::max_element(ts.begin(), ts.end());
  m.t_min = *std::min_element(ts.begin(), ts.end());
  m.success_rate = double(m.n_success) / n;
  auto max_of = [](const std::vector<double>& v) {
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::max_element(v.begin(), v.end());
  };
  m.iterations_median_converged = percentile(it_conv, 50);
  m.iterations_max_converged = max_of(it_conv);
  m.iterations_median_all = percentile(it_all, 50);
  m.iterations_max_all = max_of(it_all);
  m.wall_median_converged = percentile(wall_conv, 50);
  m.wall_max_converged = max_of(wall_conv);
  m.wall_median_all = percentile(wall_all, 50);
  m.wall_max_all = max_of(wall_all);
  return m;
}

/**
 * Violations, optimality gaps, residual distribution, success rate and
 * iteration/time statistics of `reports` against the oracle references.
 */
inline MetricsSummary compute_metrics(const ProblemInstance<double>& inst,
                                      const Matrix<double>& x_batch,
                                      const std::vector<SolveReport<double>>& reports,
                                      const std::vector<OracleRecord>& oracle,
                                      double success_tol = 1e-8, std::string method = {}) {
  return summarize_metrics(point_metrics(inst, x_batch, reports, oracle), success_tol,
                           std::move(method));
}

namespace detail {

/// JSON has no NaN; undefined statistics are written as null.
inline nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

/// Metrics as JSON; wall-time fields are written only on request so that
/// the default document is reproducible.
inline nlohmann::json to_json(const MetricsSummary& m, bool include_wall_time = false) {
  using detail::number_or_null;
  nlohmann::json j = {{"method", m.method},
                      {"n", m.n},
                      {"max_eq_violation", m.max_eq_violation},
                      {"mean_eq_violation", m.mean_eq_violation},
                      {"max_ineq_violation", m.max_ineq_violation},
                      {"mean_ineq_violation", m.mean_ineq_violation},
                      {"max_gap_percent", m.max_gap_percent},
                      {"mean_gap_percent", m.mean_gap_percent},
                      {"gap_undefined_count", m.gap_undefined_count},
                      {"t_median", number_or_null(m.t_median)},
                      {"t_p99", number_or_null(m.t_p99)},
                      {"t_max", number_or_null(m.t_max)},
                      {"t_min", number_or_null(m.t_min)},
                      {"success_rate", m.success_rate},
                      {"n_success", m.n_success},
                      {"iterations_median_converged", number_or_null(m.iterations_median_converged)},
                      {"iterations_max_converged", number_or_null(m.iterations_max_converged)},
                      {"iterations_median_all", number_or_null(m.iterations_median_all)},
                      {"iterations_max_all", number_or_null(m.iterations_max_all)}};
  if (include_wall_time) {
    j["wall_median_converged"] = number_or_null(m.wall_median_converged);
    j["wall_max_converged"] = number_or_null(m.wall_max_converged);
    j["wall_median_all"] = number_or_null(m.wall_median_all);
    j["wall_max_all"] = number_or_null(m.wall_max_all);
  }
  return j;
}

/// Mean and population standard deviation of every numeric field across
/// per-instance summaries, as in "mean (std)" table entries.
inline nlohmann::json across_instances(const std::vector<nlohmann::json>& per_instance) {
  nlohmann::json mean = nlohmann::json::object(), stddev = nlohmann::json::object();
  if (per_instance.empty()) return {{"mean", mean}, {"std", stddev}};
  for (const auto& [key, val] : per_instance.front().items()) {
    if (!val.is_number()) continue;
    std::vector<double> v;
    for (const auto& j : per_instance)
      if (j.contains(key) && j[key].is_number()) v.push_back(j[key].get<double>());
    if (v.size() != per_instance.size()) continue;
    double mu = 0;
    for (double a : v) mu += a;
    mu /= double(v.size());
    double var = 0;
    for (double a : v) var += (a - mu) * (a - mu);
    mean[key] = mu;
    stddev[key] = std::sqrt(var / double(v.size()));
  }
  return {{"mean", mean}, {"std", stddev}};
}

struct FractionRow {
  double tol = 0;
  long k = 0;
  double fraction = 0;
};

/**
 * Fraction of runs whose best T is <= tol by iteration k, for every
 * (tol, k). Runs that stopped before k keep their final best value.
 */
template <typename Scalar>
std::vector<FractionRow> convergence_fractions(const std::vector<SolveReport<Scalar>>& reports,
                                               const std::vector<double>& tolerances,
                                               const std::vector<long>& checkpoints) {
  for (const auto& r : reports)
    if (r.trace.empty())
      throw ValidationError("convergence_fractions: reports carry no trace (record_trace off)");
  std::vector<FractionRow> rows;
  if (reports.empty()) return rows;
  for (double tol : tolerances) {
    for (long k : checkpoints) {
      long hit = 0;
      for (const auto& r : reports) {
        const size_t idx = std::min(size_t(std::max(k, 0L)), r.trace.size() - 1);
        if (r.trace[idx].t_best <= tol) ++hit;
      }
      rows.push_back({tol, k, double(hit) / double(reports.size())});
    }
  }
  return rows;
}

/// Shortest round-trip decimal for a double.
inline std::string format_number(double v) { return nlohmann::json(v).dump(); }

inline std::string fractions_to_csv(
    const std::vector<std::pair<std::string, std::vector<FractionRow>>>& per_method,
    const std::string& header_comment = {}) {
  std::string out = header_comment;
  out += "tol,k,fraction,method\n";
  for (const auto& [method, rows] : per_method)
    for (const auto& r : rows)
      out += format_number(r.tol) + ',' + std::to_string(r.k) + ',' + format_number(r.fraction) +
             ',' + method + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Experiment pipeline.

inline constexpr const char* kMethodPredictor = "predictor";
inline constexpr const char* kMethodWithPredictor = "lisco_with_predictor";
inline constexpr const char* kMethodWithoutPredictor = "lisco_without_predictor";

struct ExperimentResult {
  std::string config_hash;
  std::vector<MetricsSummary> metrics;  // pooled over all instances
  std::vector<std::vector<MetricsSummary>> per_instance;
  std::vector<std::pair<std::string, std::vector<FractionRow>>> fractions;  // pooled

  const MetricsSummary& method(const std::string& name) const {
    for (const auto& m : metrics)
      if (m.method == name) return m;
    throw ValidationError("no metrics for method " + name);
  }
  const std::vector<FractionRow>& fractions_of(const std::string& name) const {
    for (const auto& f : fractions)
      if (f.first == name) return f.second;
    throw ValidationError("no fractions for method " + name);
  }
  double fraction(const std::string& name, double tol, long k) const {
    for (const auto& r : fractions_of(name))
      if (r.tol == tol && r.k == k) return r.fraction;
    throw ValidationError("no fraction row for the requested tol and k");
  }
};

namespace detail {

/// Runs `fn`, re-raising any error with the stage name prefixed.
template <typename Fn>
auto run_stage(const std::string& stage, const std::filesystem::path& stale_marker, Fn&& fn) {
  auto mark = [&] { write_text_file(stale_marker.string(), "failed at stage " + stage + "\n"); };
  try {
    return fn();
  } catch (const ValidationError& e) {
    mark();
    throw ValidationError("stage " + stage + ": " + e.what());
  } catch (const NumericalError& e) {
    mark();
    throw NumericalError("stage " + stage + ": " + e.what());
  } catch (const std::exception& e) {
    mark();
    throw Error("stage " + stage + ": " + e.what());
  }
}

inline TrainObserver progress_logger(std::ostream* log, const std::string& what, long every) {
  if (!log) return {};
  return [log, what, every](const TrainHistoryRow& r) {
    if (r.step % every == 0)
      *log << what << " step " << r.step << " loss " << r.loss << " lr " << r.lr << '\n';
  };
}

template <typename Scalar>
SolveReport<double> report_to_double(const SolveReport<Scalar>& r) {
  SolveReport<double> out;
  out.z_final = r.z_final.template cast<double>();
  out.t_final = r.t_final;
  out.converged = r.converged;
  out.iterations = r.iterations;
  out.alpha_final = r.alpha_final;
  out.resets = r.resets;
  out.status = r.status;
  out.trace = r.trace;
  out.wall_time = r.wall_time;
  return out;
}

struct InstanceRun {
  ProblemInstance<double> inst;
  Matrix<double> x_test;
  std::vector<OracleRecord> oracle;
  std::vector<std::pair<std::string, std::vector<SolveReport<double>>>> reports;
};

struct RunContext {
  const ExperimentConfig& cfg;
  std::filesystem::path stale;
  std::string config_hash;
  std::string csv_comment;
  std::ostream* log;
};

template <typename Scalar>
InstanceRun run_instance(const RunContext& ctx, Index which, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const ExperimentConfig& cfg = ctx.cfg;
  const auto& stale = ctx.stale;
  const std::string tag = "[instance " + std::to_string(which) + "] ";
  const auto sub = [&](std::uint64_t seed) { return derive_seed(seed, std::uint64_t(which)); };
  fs::create_directories(dir);
  std::ostream* log = ctx.log;

  InstanceRun run;
  run.inst = run_stage(tag + "instance", stale, [&] {
    auto i = cfg.instance.path
                 ? load_instance(*cfg.instance.path)
                 : gen_instance<double>(cfg.instance.kind, cfg.instance.n_y, cfg.instance.n_h,
                                        cfg.instance.n_g, cfg.instance.seed + std::uint64_t(which));
    save_instance(i, (dir / "instance.json").string());
    return i;
  });
  const auto& inst = run.inst;
  const auto inst_s = inst.template cast<Scalar>();
  if (log)
    *log << tag << to_string(inst.kind) << " n_y=" << inst.n_y << " n_h=" << inst.n_h
         << " n_g=" << inst.n_g << " seed=" << inst.seed << '\n';

  auto save_training = [&](const std::string& name, const TrainResult<Scalar>& tr, const char* role,
                           const nlohmann::json& train_cfg) {
    fs::create_directories(dir / name);
    nlohmann::json meta = {{"role", role},
                           {"instance_seed", inst.seed},
                           {"instance_hash", hash_hex(instance_hash(inst))},
                           {"residual_row_order_version", kResidualRowOrderVersion},
                           {"input_log_base", "e"},
                           {"config_hash", ctx.config_hash},
                           {"train_config", train_cfg}};
    save_weights(tr.params, (dir / name / "weights.json").string(), meta);
    write_text_file((dir / name / "history.csv").string(),
                    ctx.csv_comment + history_to_csv(tr.history));
  };

  std::optional<MlpParams<Scalar>> predictor, solver_with, solver_without;
  if (cfg.with_predictor) {
    predictor = run_stage(tag + "train_predictor", stale, [&] {
      PredictorTrainConfig pc = cfg.predictor;
      pc.seed = sub(cfg.predictor.seed);
      auto tr = train_predictor(inst_s, pc, progress_logger(log, tag + "predictor", 5000));
      save_training("predictor", tr, "predictor", to_json(pc));
      return tr.params;
    });
    solver_with = run_stage(tag + "train_solver_with_predictor", stale, [&] {
      SolverTrainConfig sc = cfg.solver;
      sc.use_predictor = true;
      sc.seed = sub(cfg.solver.seed);
      auto tr = train_solver(inst_s, sc, &*predictor, progress_logger(log, tag + "solver(pred)", 5000));
      save_training("solver_with_predictor", tr, "solver", to_json(sc));
      return tr.params;
    });
  }
  if (cfg.without_predictor) {
    solver_without = run_stage(tag + "train_solver_without_predictor", stale, [&] {
      SolverTrainConfig sc = cfg.solver;
      sc.use_predictor = false;
      sc.seed = derive_seed(sub(cfg.solver.seed), 7);
      auto tr = train_solver<Scalar>(inst_s, sc, nullptr,
                                     progress_logger(log, tag + "solver(rand)", 5000));
      save_training("solver_without_predictor", tr, "solver", to_json(sc));
      return tr.params;
    });
  }

  const std::uint64_t test_seed = sub(cfg.test_seed);
  run.x_test = sample_params(inst, cfg.n_test, test_seed).x;

  run.oracle = run_stage(tag + "oracle", stale, [&] {
    std::vector<OracleRecord> records;
    long failures = 0;
    for (Index i = 0; i < run.x_test.rows(); ++i) {
      const Vector<double> x = run.x_test.row(i).transpose();
      auto sol = oracle_solve(inst, x, cfg.newton, derive_seed(test_seed, std::uint64_t(i) + 1));
      if (sol.status != OracleStatus::Converged) ++failures;
      records.push_back(make_oracle_record(inst, i, x, sol));
    }
    write_text_file((dir / "oracle.jsonl").string(), oracle_cache_to_jsonl(inst, records));
    if (log) *log << tag << "oracle converged on " << records.size() - size_t(failures) << "/"
                  << records.size() << '\n';
    return records;
  });

  std::string reports_jsonl;
  auto solve_stage = [&](const std::string& method, const MlpParams<Scalar>* pred,
                         const MlpParams<Scalar>* solver) {
    return run_stage(tag + "solve_" + method, stale, [&] {
      std::vector<SolveReport<double>> reps;
      SolveOptions opts = cfg.solve;
      opts.record_trace = true;
      opts.use_predictor = pred != nullptr;
      const Matrix<Scalar> xs = run.x_test.template cast<Scalar>();
      for (Index i = 0; i < xs.rows(); ++i) {
        const Vector<Scalar> x = xs.row(i).transpose();
        SolveOptions point = opts;
        point.seed = derive_seed(opts.seed, std::uint64_t(i));
        SolveReport<Scalar> r;
        if (solver) {
          r = lisco_solve(inst_s, x, pred, *solver, point);
        } else {
          // Predictor alone: zero solver iterations.
          point.n_max = 0;
          auto no_step = [](const KktResidual<Scalar>& f, const Vector<Scalar>&) {
            return Vector<Scalar>(Vector<Scalar>::Zero(f.f_vec.size()));
          };
          r = lisco_iterate(inst_s, x, predictor_predict(*pred, x), no_step, point);
        }
        auto rd = report_to_double(r);
        // T is re-evaluated in double so single-precision runs are comparable.
        const Vector<double> xd = run.x_test.row(i).transpose();
        rd.t_final = kkt_residual(inst, rd.z_final, xd, Convexification<double>{}, cfg.solve.fb_eps)
                         .t_metric;
        nlohmann::json j = report_to_json(rd);
        j["method"] = method;
        j["instance"] = which;
        j["index"] = i;
        reports_jsonl += j.dump();
        reports_jsonl += '\n';
        reps.push_back(std::move(rd));
      }
      return reps;
    });
  };

  if (predictor) run.reports.emplace_back(kMethodPredictor, solve_stage(kMethodPredictor, &*predictor, nullptr));
  if (solver_with)
    run.reports.emplace_back(kMethodWithPredictor,
                             solve_stage(kMethodWithPredictor, &*predictor, &*solver_with));
  if (solver_without)
    run.reports.emplace_back(kMethodWithoutPredictor,
                             solve_stage(kMethodWithoutPredictor, nullptr, &*solver_without));
  write_text_file((dir / "reports.jsonl").string(), reports_jsonl);
  return run;
}

template <typename Scalar>
ExperimentResult run_experiment_impl(const ExperimentConfig& cfg, std::ostream* log) {
  namespace fs = std::filesystem;
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  const fs::path stale = out / "STALE";
  write_text_file(stale.string(), "running\n");

  ExperimentResult result;
  result.config_hash = config_hash(cfg);
  const nlohmann::json seeds = {{"instance", cfg.instance.seed},
                                {"test", cfg.test_seed},
                                {"predictor", cfg.predictor.seed},
                                {"solver", cfg.solver.seed},
                                {"solve", cfg.solve.seed}};
  const RunContext ctx{cfg, stale, result.config_hash,
                       "# config_hash=" + result.config_hash + " seeds=" + seeds.dump() + "\n", log};
  write_text_file((out / "config.json").string(), to_json(cfg).dump(2) + "\n");

  const Index n_inst = cfg.instance.path ? 1 : cfg.n_instances;
  std::vector<InstanceRun> runs;
  for (Index i = 0; i < n_inst; ++i)
    runs.push_back(run_instance<Scalar>(ctx, i, out / ("instance_" + std::to_string(i))));

  run_stage("metrics", stale, [&] {
    nlohmann::json metrics = {{"config_hash", result.config_hash},
                              {"seeds", seeds},
                              {"n_instances", n_inst},
                              {"success_tol", cfg.success_tol}};
    nlohmann::json timing = metrics;
    result.per_instance.resize(size_t(n_inst));
    std::string reports_all;
    for (const auto& [method, unused] : runs.front().reports) {
      (void)unused;
      std::vector<PointMetrics> pooled_points;
      std::vector<SolveReport<double>> pooled_reports;
      std::vector<nlohmann::json> per_inst_json;
      nlohmann::json per_inst_timing = nlohmann::json::array();
      for (size_t r = 0; r < runs.size(); ++r) {
        const auto& run = runs[r];
        const auto& reps = [&]() -> const std::vector<SolveReport<double>>& {
          for (const auto& mr : run.reports)
            if (mr.first == method) return mr.second;
          throw Error("method missing for an instance");
        }();
        auto pts = point_metrics(run.inst, run.x_test, reps, run.oracle);
        auto m = summarize_metrics(pts, cfg.success_tol, method);
        per_inst_json.push_back(to_json(m, false));
        per_inst_timing.push_back(to_json(m, true));
        result.per_instance[r].push_back(m);
        pooled_points.insert(pooled_points.end(), pts.begin(), pts.end());
        pooled_reports.insert(pooled_reports.end(), reps.begin(), reps.end());
      }
      auto pooled = summarize_metrics(pooled_points, cfg.success_tol, method);
      metrics["methods"][method] = {{"pooled", to_json(pooled, false)},
                                    {"per_instance", per_inst_json},
                                    {"across_instances", across_instances(per_inst_json)}};
      timing["methods"][method] = {{"pooled", to_json(pooled, true)},
                                   {"per_instance", per_inst_timing}};
      result.metrics.push_back(std::move(pooled));
      if (method != kMethodPredictor)
        result.fractions.emplace_back(
            method, convergence_fractions(pooled_reports, cfg.tolerances, cfg.checkpoints));
    }
    for (size_t r = 0; r < runs.size(); ++r) {
      std::ifstream in(out / ("instance_" + std::to_string(r)) / "reports.jsonl");
      reports_all.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    write_text_file((out / "reports.jsonl").string(), reports_all);
    write_text_file((out / "metrics.json").string(), metrics.dump(2) + "\n");
    write_text_file((out / "timing.json").string(), timing.dump(2) + "\n");
    write_text_file((out / "fractions.csv").string(),
                    fractions_to_csv(result.fractions, ctx.csv_comment));
    return 0;
  });

  fs::remove(stale);
  return result;
}

}  // namespace detail

/**
 * Full evaluation pipeline. For each instance: generation or loading,
 * predictor and solver training, test sampling, oracle references and
 * inference for every method. Metrics and convergence fractions are pooled
 * over instances and also reported per instance. Outputs go to cfg.out_dir;
 * a STALE marker remains there if any stage fails.
 */
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (cfg.precision == Precision::Single) return detail::run_experiment_impl<float>(cfg, log);
  return detail::run_experiment_impl<double>(cfg, log);
}

}  // namespace lisco
