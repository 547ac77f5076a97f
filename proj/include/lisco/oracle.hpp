#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisco/common.hpp"
#include "lisco/kkt.hpp"
#include "lisco/problems.hpp"

namespace lisco {

struct NewtonOptions {
  long max_iters = 200;
  double tol = 1e-12;  // on T
  double armijo_c = 1e-4;
  double backtrack_factor = 0.5;
  double min_step = 1e-12;
  double levenberg_mu0 = 1e-8;
  double fb_eps = kDefaultFbEps;

  void validate() const {
    if (max_iters <= 0 || !(tol > 0) || !(armijo_c > 0) || !(min_step > 0) ||
        !(levenberg_mu0 > 0))
      throw ValidationError("newton options must be positive");
    if (!(backtrack_factor > 0 && backtrack_factor < 1))
      throw ValidationError("newton backtrack_factor must lie in (0, 1)");
  }
};

enum class OracleStatus { Converged, MaxIters, Singular };

inline std::string_view to_string(OracleStatus s) {
  switch (s) {
    case OracleStatus::Converged: return "converged";
    case OracleStatus::MaxIters: return "max_iters";
    case OracleStatus::Singular: return "singular";
  }
  return "max_iters";
}

inline OracleStatus parse_oracle_status(std::string_view tag) {
  if (tag == "converged") return OracleStatus::Converged;
  if (tag == "max_iters") return OracleStatus::MaxIters;
  if (tag == "singular") return OracleStatus::Singular;
  throw ValidationError("unknown oracle status '" + std::string(tag) + "'");
}

template <typename Scalar = double>
struct OracleSolution {
  Vector<Scalar> z_star;
  Scalar t_star = 0;
  OracleStatus status = OracleStatus::MaxIters;
  long iterations = 0;
  std::vector<Scalar> t_history;  // T after every accepted step, start included
};

namespace detail {

/// Backtracking on T along d; returns the accepted step length or 0.
template <typename Scalar>
Scalar armijo_search(const ProblemInstance<Scalar>& inst, const Vector<Scalar>& z,
                     const Vector<Scalar>& x, const Vector<Scalar>& d, Scalar t, Scalar slope,
                     const NewtonOptions& opts, Vector<Scalar>& z_out,
                     KktResidual<Scalar>& f_out) {
  const Scalar eps = Scalar(opts.fb_eps);
  for (Scalar s = 1; s >= Scalar(opts.min_step); s *= Scalar(opts.backtrack_factor)) {
    Vector<Scalar> trial = z + s * d;
    auto f = kkt_residual(inst, trial, x, Convexification<Scalar>{}, eps);
    if (f.finite() && f.t_metric <= t + Scalar(opts.armijo_c) * s * slope && f.t_metric < t) {
      z_out = std::move(trial);
      f_out = std::move(f);
      return s;
    }
  }
  return 0;
}

}  // namespace detail

/**
 * Damped Newton method on the smoothed FB system F(z; x) = 0.
 *
 * The direction solves (J + mu I) d = -F, starting at mu = 0 and escalating
 * mu by 10 while the factorization is numerically singular. If no Armijo step
 * on T exists along it, the Levenberg-Marquardt direction
 * (J^T J + mu I) d = -J^T F (always a descent direction for T) is tried with
 * the same escalation. Singular is reported once mu exceeds 1e6 ||J||.
 */
template <typename Scalar>
OracleSolution<Scalar> newton_fb_solve(const ProblemInstance<Scalar>& inst,
                                       const Vector<Scalar>& x, const Vector<Scalar>& z0,
                                       const NewtonOptions& opts = {}) {
  opts.validate();
  require_dims(z0.size() == inst.n_z() && x.size() == inst.n_h, "newton_fb_solve inputs");
  const Scalar eps = Scalar(opts.fb_eps);
  OracleSolution<Scalar> sol;
  Vector<Scalar> z = z0;
  auto f = kkt_residual(inst, z, x, Convexification<Scalar>{}, eps);
  if (!f.finite()) {
    sol.z_star = z;
    sol.t_star = std::numeric_limits<Scalar>::infinity();
    sol.status = OracleStatus::Singular;
    return sol;
  }
  sol.t_history.push_back(f.t_metric);

  for (long it = 0; it < opts.max_iters; ++it) {
    if (f.t_metric <= Scalar(opts.tol)) {
      sol.status = OracleStatus::Converged;
      break;
    }
    const Matrix<Scalar> jac = kkt_jacobian(inst, z, x, Convexification<Scalar>{}, eps);
    const Scalar jnorm = std::max(jac.norm(), Scalar(1e-300));
    const Scalar mu_cap = Scalar(1e6) * jnorm;
    Vector<Scalar> z_next;
    KktResidual<Scalar> f_next;
    bool accepted = false;

    // Newton / Levenberg-damped Newton.
    for (Scalar mu = 0; mu <= mu_cap;
         mu = (mu == Scalar(0)) ? Scalar(opts.levenberg_mu0) : mu * Scalar(10)) {
      Matrix<Scalar> m = jac;
      m.diagonal().array() += mu;
      Eigen::PartialPivLU<Matrix<Scalar>> lu(m);
      if (!(lu.rcond() > Scalar(1e-14))) continue;
      const Vector<Scalar> d = lu.solve(-f.f_vec);
      if (!d.allFinite()) continue;
      const Scalar slope = f.f_vec.dot(jac * d);
      if (slope < 0 && detail::armijo_search(inst, z, x, d, f.t_metric, slope, opts, z_next,
                                             f_next) > 0) {
        accepted = true;
      }
      break;
    }
    // Levenberg-Marquardt fallback.
    if (!accepted) {
      const Vector<Scalar> grad = jac.transpose() * f.f_vec;
      const Matrix<Scalar> normal = jac.transpose() * jac;
      for (Scalar mu = Scalar(opts.levenberg_mu0) * jnorm * jnorm; mu <= mu_cap * jnorm;
           mu *= Scalar(10)) {
        Matrix<Scalar> m = normal;
        m.diagonal().array() += mu;
        Eigen::LLT<Matrix<Scalar>> llt(m);
        if (llt.info() != Eigen::Success) continue;
        const Vector<Scalar> d = llt.solve(-grad);
        if (!d.allFinite()) continue;
        const Scalar slope = grad.dot(d);
        if (slope < 0 && detail::armijo_search(inst, z, x, d, f.t_metric, slope, opts, z_next,
                                               f_next) > 0) {
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      sol.status = OracleStatus::Singular;
      sol.iterations = it;
      sol.z_star = z;
      sol.t_star = f.t_metric;
      return sol;
    }
    z = std::move(z_next);
    f = std::move(f_next);
    sol.t_history.push_back(f.t_metric);
    sol.iterations = it + 1;
  }
  if (f.t_metric <= Scalar(opts.tol)) sol.status = OracleStatus::Converged;
  sol.z_star = z;
  sol.t_star = f.t_metric;
  return sol;
}

/// Number of random starts used for nonconvex kinds.
inline constexpr int kOracleMultistarts = 5;

/**
 * Reference solution for one parameter vector. Convex QPs start from z = 0
 * (falling back to random starts if that fails); other kinds run
 * kOracleMultistarts seeded N(0,1) starts and keep the converged root with
 * the lowest objective.
 */
template <typename Scalar>
OracleSolution<Scalar> oracle_solve(const ProblemInstance<Scalar>& inst, const Vector<Scalar>& x,
                                    const NewtonOptions& opts = {}, std::uint64_t seed = 0) {
  if (inst.kind == ProblemKind::ConvexQp) {
    auto sol = newton_fb_solve(inst, x, Vector<Scalar>(Vector<Scalar>::Zero(inst.n_z())), opts);
    if (sol.status == OracleStatus::Converged) return sol;
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::optional<OracleSolution<Scalar>> best;
  Scalar best_f = std::numeric_limits<Scalar>::infinity();
  OracleSolution<Scalar> lowest_t;
  lowest_t.t_star = std::numeric_limits<Scalar>::infinity();
  for (int s = 0; s < kOracleMultistarts; ++s) {
    Vector<Scalar> z0(inst.n_z());
    for (Index i = 0; i < z0.size(); ++i) z0[i] = Scalar(normal(rng));
    auto sol = newton_fb_solve(inst, x, z0, opts);
    if (sol.status == OracleStatus::Converged) {
      const Scalar fval = objective(inst, sol.z_star.head(inst.n_y), x);
      if (fval < best_f) {
        best_f = fval;
        best = std::move(sol);
      }
    } else if (sol.t_star < lowest_t.t_star) {
      lowest_t = std::move(sol);
    }
  }
  if (best) return *best;
  return lowest_t;
}

/**
 * Exhaustive active-set solver for convex QPs: each subset S of inequality
 * rows is treated as equalities, the KKT system is solved, and the feasible
 * candidate (lambda_S >= -1e-10, G y - h <= 1e-10) with least objective wins.
 * Exponential in n_g; intended for tiny instances.
 */
template <typename Scalar>
OracleSolution<Scalar> active_set_enumerate(const ProblemInstance<Scalar>& inst,
                                            const Vector<Scalar>& x) {
  if (inst.kind != ProblemKind::ConvexQp)
    throw ValidationError("active_set_enumerate requires a convex QP");
  require_dims(x.size() == inst.n_h, "active_set_enumerate x");
  if (inst.n_g > 24) throw ValidationError("active_set_enumerate: too many inequalities");
  const Index ny = inst.n_y, nh = inst.n_h, ng = inst.n_g;
  const Scalar tol = Scalar(1e-10);

  std::optional<Vector<Scalar>> best;
  Scalar best_f = std::numeric_limits<Scalar>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t(1) << ng); ++mask) {
    std::vector<Index> active;
    for (Index i = 0; i < ng; ++i)
      if (mask & (std::uint64_t(1) << i)) active.push_back(i);
    const Index na = Index(active.size());
    const Index dim = ny + nh + na;
    Matrix<Scalar> kkt = Matrix<Scalar>::Zero(dim, dim);
    Vector<Scalar> rhs(dim);
    kkt.block(0, 0, ny, ny).diagonal() = *inst.q_diag;
    if (nh > 0) {
      kkt.block(0, ny, ny, nh) = inst.a_mat.transpose();
      kkt.block(ny, 0, nh, ny) = inst.a_mat;
    }
    for (Index a = 0; a < na; ++a) {
      kkt.block(0, ny + nh + a, ny, 1) = inst.g_mat.row(active[size_t(a)]).transpose();
      kkt.block(ny + nh + a, 0, 1, ny) = inst.g_mat.row(active[size_t(a)]);
    }
    rhs.head(ny) = -inst.p;
    rhs.segment(ny, nh) = x;
    for (Index a = 0; a < na; ++a) rhs[ny + nh + a] = inst.h_vec[active[size_t(a)]];

    Eigen::FullPivLU<Matrix<Scalar>> lu(kkt);
    if (!lu.isInvertible()) continue;
    const Vector<Scalar> sol = lu.solve(rhs);
    if (!sol.allFinite()) continue;
    const auto y = sol.head(ny);
    if (na > 0 && sol.tail(na).minCoeff() < -tol) continue;
    if (ng > 0 && (inst.g_mat * y - inst.h_vec).maxCoeff() > tol) continue;
    const Scalar fval = objective(inst, y, x);
    if (fval < best_f) {
      best_f = fval;
      Vector<Scalar> z = Vector<Scalar>::Zero(inst.n_z());
      z.head(ny + nh) = sol.head(ny + nh);
      for (Index a = 0; a < na; ++a) z[ny + nh + active[size_t(a)]] = sol[ny + nh + a];
      best = std::move(z);
    }
  }
  if (!best) throw NumericalError("active_set_enumerate: no feasible active set");
  OracleSolution<Scalar> out;
  out.z_star = *best;
  out.t_star = kkt_residual(inst, out.z_star, x, Convexification<Scalar>{}, Scalar(0)).t_metric;
  out.status = OracleStatus::Converged;
  return out;
}

class UndefinedGap : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Relative objective excess over the reference, in percent.
inline double optimality_gap(double f_hat, double f_star) {
  if (std::abs(f_star) < 1e-12) throw UndefinedGap("optimality gap undefined for |f*| < 1e-12");
  return 100.0 * (f_hat - f_star) / std::abs(f_star);
}

// ---------------------------------------------------------------------------
// Oracle cache (JSON lines keyed by instance hash).

struct OracleRecord {
  Index index = 0;
  Vector<double> x;
  Vector<double> y;
  Vector<double> nu;
  Vector<double> lambda;
  double f = 0;
  double t = 0;
  OracleStatus status = OracleStatus::MaxIters;
};

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << h;
  return s.str();
}

inline OracleRecord make_oracle_record(const ProblemInstance<double>& inst, Index index,
                                       const Vector<double>& x,
                                       const OracleSolution<double>& sol) {
  OracleRecord r;
  r.index = index;
  r.x = x;
  r.y = sol.z_star.head(inst.n_y);
  r.nu = sol.z_star.segment(inst.n_y, inst.n_h);
  r.lambda = sol.z_star.tail(inst.n_g);
  r.f = objective(inst, r.y, x);
  r.t = sol.t_star;
  r.status = sol.status;
  return r;
}

inline std::string oracle_cache_to_jsonl(const ProblemInstance<double>& inst,
                                         const std::vector<OracleRecord>& records) {
  const std::string key = hash_hex(instance_hash(inst));
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["instance_hash"] = key;
    j["index"] = r.index;
    j["x"] = detail::to_json_array(r.x);
    j["y"] = detail::to_json_array(r.y);
    j["nu"] = detail::to_json_array(r.nu);
    j["lambda"] = detail::to_json_array(r.lambda);
    j["f"] = r.f;
    j["t"] = r.t;
    j["status"] = std::string(to_string(r.status));
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Reads a cache file; records of other instances are skipped.
inline std::vector<OracleRecord> load_oracle_cache(const std::string& path,
                                                   const ProblemInstance<double>& inst) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open oracle cache " + path);
  const std::string key = hash_hex(instance_hash(inst));
  std::vector<OracleRecord> out;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("instance_hash").get<std::string>() != key) continue;
      OracleRecord r;
      r.index = j.at("index").get<Index>();
      r.x = detail::vector_from_json<double>(j.at("x"), inst.n_h, "cache x");
      r.y = detail::vector_from_json<double>(j.at("y"), inst.n_y, "cache y");
      r.nu = detail::vector_from_json<double>(j.at("nu"), inst.n_h, "cache nu");
      r.lambda = detail::vector_from_json<double>(j.at("lambda"), inst.n_g, "cache lambda");
      r.f = j.at("f").get<double>();
      r.t = j.value("t", 0.0);
      r.status = parse_oracle_status(j.at("status").get<std::string>());
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed oracle cache " + path + ": " + e.what());
  }
  return out;
}

}  // namespace lisco
