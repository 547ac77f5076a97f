#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "lisco/common.hpp"
#include "lisco/kkt.hpp"
#include "lisco/nn.hpp"
#include "lisco/training.hpp"

namespace lisco {

/// Quantity compared against tau for termination.
enum class TerminationMetric {
  SquaredNorm,  // ||F||^2 < tau
  Norm,         // ||F|| < tau
};

struct SolveOptions {
  long n_max = 500;
  double tau = 1e-8;
  double alpha0 = 1.0;
  double omega = 10.0;
  double beta = 0.95;
  bool use_predictor = true;
  bool record_trace = false;
  TerminationMetric metric = TerminationMetric::SquaredNorm;
  double fb_eps = kDefaultFbEps;
  /// Seeds the standard-normal start when neither a predictor nor z0 is given.
  std::uint64_t seed = 0;

  void validate() const {
    if (!(beta > 0 && beta < 1)) throw ValidationError("solve options: beta must lie in (0, 1)");
    if (!(omega > 1)) throw ValidationError("solve options: omega must exceed 1");
    if (!(tau > 0)) throw ValidationError("solve options: tau must be positive");
    if (!(alpha0 > 0)) throw ValidationError("solve options: alpha0 must be positive");
    if (n_max < 0) throw ValidationError("solve options: n_max must be non-negative");
  }
};

struct TraceEntry {
  double t = 0;        // T of the iterate evaluated at this iteration
  double t_best = 0;   // T of the best iterate so far
  double alpha = 0;    // step size after this iteration
  bool reset = false;  // iterate restored to the best one
};

enum class SolveStatus { Converged, MaxIterations, NonFiniteStart };

inline std::string_view to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged: return "converged";
    case SolveStatus::MaxIterations: return "max_iterations";
    case SolveStatus::NonFiniteStart: return "non_finite_start";
  }
  return "max_iterations";
}

template <typename Scalar = double>
struct SolveReport {
  Vector<Scalar> z_final;
  double t_final = 0;
  bool converged = false;
  long iterations = 0;
  double alpha_final = 0;
  long resets = 0;
  SolveStatus status = SolveStatus::MaxIterations;
  std::vector<TraceEntry> trace;  // entry 0 is the start point
  double wall_time = 0;           // seconds
};

namespace detail {

template <typename Scalar>
double termination_value(const KktResidual<Scalar>& f, TerminationMetric m) {
  return m == TerminationMetric::Norm ? double(f.norm2) : double(f.f_vec.squaredNorm());
}

}  // namespace detail

/**
 * Learned iteration with best-iterate tracking and step-size backoff.
 *
 * `step_fn(F, x)` returns the step for residual F. The iteration stops when
 * the termination metric drops below tau. Whenever ||F|| exceeds omega times
 * the best norm seen (or F is non-finite) the iterate is restored to the best
 * one and alpha shrinks by beta; the next step is then recomputed from the
 * restored residual. Without convergence the best iterate is returned.
 */
template <typename Scalar, typename StepFn>
SolveReport<Scalar> lisco_iterate(const ProblemInstance<Scalar>& inst,
                                  const Vector<Scalar>& x, Vector<Scalar> z0, StepFn&& step_fn,
                                  const SolveOptions& opts) {
  opts.validate();
  require_dims(z0.size() == inst.n_z(), "lisco z0");
  require_dims(x.size() == inst.n_h, "lisco x");
  const auto start = std::chrono::steady_clock::now();
  const Convexification<Scalar> no_conv{};
  const Scalar eps = Scalar(opts.fb_eps);

  SolveReport<Scalar> rep;
  Vector<Scalar> z = std::move(z0);
  auto f = kkt_residual(inst, z, x, no_conv, eps);
  double alpha = opts.alpha0;

  auto finish = [&](SolveReport<Scalar>& r) {
    r.alpha_final = alpha;
    r.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
  };

  if (!f.finite()) {
    rep.z_final = z;
    rep.t_final = std::numeric_limits<double>::infinity();
    rep.status = SolveStatus::NonFiniteStart;
    return finish(rep);
  }

  Vector<Scalar> z_best = z;
  KktResidual<Scalar> f_best = f;
  if (opts.record_trace)
    rep.trace.push_back({double(f.t_metric), double(f.t_metric), alpha, false});

  if (detail::termination_value(f, opts.metric) < opts.tau) {
    rep.z_final = z;
    rep.t_final = double(f.t_metric);
    rep.converged = true;
    rep.status = SolveStatus::Converged;
    return finish(rep);
  }

  long k = 0;
  while (k < opts.n_max) {
    const Vector<Scalar> delta = step_fn(f, x);
    z += Scalar(alpha) * delta;
    f = kkt_residual(inst, z, x, no_conv, eps);
    ++k;
    const bool finite = f.finite() && delta.allFinite();

    if (finite && detail::termination_value(f, opts.metric) < opts.tau) {
      if (opts.record_trace)
        rep.trace.push_back({double(f.t_metric), double(f.t_metric), alpha, false});
      rep.z_final = z;
      rep.t_final = double(f.t_metric);
      rep.converged = true;
      rep.status = SolveStatus::Converged;
      rep.iterations = k;
      return finish(rep);
    }
    const double t_eval = finite ? double(f.t_metric) : std::numeric_limits<double>::infinity();
    if (finite && f.norm2 < f_best.norm2) {
      z_best = z;
      f_best = f;
    }
    bool reset = false;
    if (!finite || f.norm2 > Scalar(opts.omega) * f_best.norm2) {
      z = z_best;
      f = f_best;
      alpha *= opts.beta;
      reset = true;
      ++rep.resets;
    }
    if (opts.record_trace) rep.trace.push_back({t_eval, double(f_best.t_metric), alpha, reset});
  }

  rep.z_final = z_best;
  rep.t_final = double(f_best.t_metric);
  rep.iterations = k;
  rep.status = SolveStatus::MaxIterations;
  return finish(rep);
}

/// Start point: predictor output, caller-supplied z0, or N(0,1) from opts.seed.
template <typename Scalar>
Vector<Scalar> lisco_start(const ProblemInstance<Scalar>& inst, const Vector<Scalar>& x,
                           const std::type_identity_t<MlpParams<Scalar>>* predictor, const SolveOptions& opts,
                           const std::optional<std::type_identity_t<Vector<Scalar>>>& z0 = std::nullopt) {
  if (z0) return *z0;
  if (predictor && opts.use_predictor) return predictor_predict(*predictor, x);
  Rng rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector<Scalar> z(inst.n_z());
  for (Index i = 0; i < z.size(); ++i) z[i] = Scalar(normal(rng));
  return z;
}

namespace detail {

template <typename Scalar>
void check_networks(const ProblemInstance<Scalar>& inst, const std::type_identity_t<MlpParams<Scalar>>* predictor,
                    const MlpParams<Scalar>& solver) {
  if (solver.role != NetworkRole::Solver && solver.role != NetworkRole::Unspecified)
    throw RoleMismatch("lisco_solve: solver weights have role " +
                       std::string(to_string(solver.role)));
  require_dims(solver.in_dim() == solver_in_dim(inst.n_z(), inst.n_h) &&
                   solver.out_dim() == inst.n_z(),
               "solver network shape");
  if (predictor) {
    if (predictor->role != NetworkRole::Predictor && predictor->role != NetworkRole::Unspecified)
      throw RoleMismatch("lisco_solve: predictor weights have role " +
                         std::string(to_string(predictor->role)));
    require_dims(predictor->in_dim() == inst.n_h && predictor->out_dim() == inst.n_z(),
                 "predictor network shape");
  }
}

}  // namespace detail

template <typename Scalar>
SolveReport<Scalar> lisco_solve(const ProblemInstance<Scalar>& inst, const Vector<Scalar>& x,
                                const std::type_identity_t<MlpParams<Scalar>>* predictor,
                                const MlpParams<Scalar>& solver, const SolveOptions& opts,
                                const std::optional<std::type_identity_t<Vector<Scalar>>>& z0 = std::nullopt) {
  detail::check_networks(inst, predictor, solver);
  auto step = [&solver](const KktResidual<Scalar>& f, const Vector<Scalar>& xv) {
    return solver_predict_step(solver, f, xv);
  };
  return lisco_iterate(inst, x, lisco_start(inst, x, predictor, opts, z0), step, opts);
}

/// Per-point solves over a batch; point i uses seed derive_seed(opts.seed, i)
/// for its random start. Failures stay local to their point.
template <typename Scalar>
std::vector<SolveReport<Scalar>> lisco_solve_batch(const ProblemInstance<Scalar>& inst,
                                                   const Matrix<Scalar>& x_batch,
                                                   const std::type_identity_t<MlpParams<Scalar>>* predictor,
                                                   const MlpParams<Scalar>& solver,
                                                   const SolveOptions& opts) {
  detail::check_networks(inst, predictor, solver);
  require_dims(x_batch.cols() == inst.n_h, "lisco batch x width");
  std::vector<SolveReport<Scalar>> reports;
  reports.reserve(size_t(x_batch.rows()));
  for (Index i = 0; i < x_batch.rows(); ++i) {
    SolveOptions point_opts = opts;
    point_opts.seed = derive_seed(opts.seed, std::uint64_t(i));
    const Vector<Scalar> x = x_batch.row(i).transpose();
    reports.push_back(lisco_solve(inst, x, predictor, solver, point_opts));
  }
  return reports;
}

/// One JSON-lines record; the trace is included only when recorded.
template <typename Scalar>
nlohmann::json report_to_json(const SolveReport<Scalar>& r, bool include_wall_time = true) {
  nlohmann::json j;
  j["converged"] = r.converged;
  j["status"] = std::string(to_string(r.status));
  j["iterations"] = r.iterations;
  j["t_final"] = r.t_final;
  j["alpha_final"] = r.alpha_final;
  j["resets"] = r.resets;
  j["z_final"] = detail::to_json_array(r.z_final);
  if (include_wall_time) j["wall_time"] = r.wall_time;
  if (!r.trace.empty()) {
    nlohmann::json t = nlohmann::json::array(), tb = nlohmann::json::array(),
                   a = nlohmann::json::array(), rs = nlohmann::json::array();
    for (const auto& e : r.trace) {
      t.push_back(e.t);
      tb.push_back(e.t_best);
      a.push_back(e.alpha);
      rs.push_back(e.reset);
    }
    j["trace"] = {{"t", t}, {"t_best", tb}, {"alpha", a}, {"reset", rs}};
  }
  return j;
}

}  // namespace lisco
