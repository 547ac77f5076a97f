#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisco/common.hpp"
#include "lisco/kkt.hpp"
#include "lisco/nn.hpp"
#include "lisco/problems.hpp"

namespace lisco {

// Loss convexification for nonconvex objectives. The linearization point is
// chosen per sample by the loss (prediction for the predictor, current iterate
// for the solver), so only the switch and the penalty live here.
enum class ConvexifyMode { Auto, On, Off };

inline std::string_view to_string(ConvexifyMode m) {
  switch (m) {
    case ConvexifyMode::On: return "on";
    case ConvexifyMode::Off: return "off";
    case ConvexifyMode::Auto: break;
  }
  return "auto";
}

inline ConvexifyMode parse_convexify_mode(std::string_view tag) {
  if (tag == "auto") return ConvexifyMode::Auto;
  if (tag == "on") return ConvexifyMode::On;
  if (tag == "off") return ConvexifyMode::Off;
  throw ValidationError("unknown convexify mode '" + std::string(tag) + "'");
}

template <typename Scalar = double>
struct ConvexifySetting {
  bool enabled = false;
  Scalar rho = 1;

  Convexification<Scalar> at(const Vector<Scalar>& y_lin) const {
    if (!enabled) return {};
    return Convexification<Scalar>::at(y_lin, rho);
  }
};

/// Auto enables convexification for every kind except the convex QP.
inline bool convexify_enabled(ConvexifyMode mode, ProblemKind kind) {
  if (mode == ConvexifyMode::Auto) return kind != ProblemKind::ConvexQp;
  return mode == ConvexifyMode::On;
}

// ---------------------------------------------------------------------------
// Configurations. Defaults are the desk-scale preset; paper() returns the
// full-scale hyperparameters.

struct PredictorTrainConfig {
  Index hidden_dim = 256;
  double leak = kDefaultLeak;
  Index batch_size = 256;
  double lr_start = 1e-3;
  long patience = 1000;
  long cooldown = 100;
  double lr_factor = 0.1;
  double min_lr = 1e-8;
  long max_epochs = 30000;
  double weight_decay = 1e-3;
  double rho = 1.0;
  ConvexifyMode convexify = ConvexifyMode::Auto;
  double fb_eps = kDefaultFbEps;
  std::uint64_t seed = 0;

  static PredictorTrainConfig paper() {
    PredictorTrainConfig c;
    c.hidden_dim = 2048;
    c.batch_size = 4096;
    c.max_epochs = 150000;
    return c;
  }

  void validate() const {
    if (hidden_dim <= 0 || batch_size <= 0 || max_epochs <= 0 || patience <= 0 || cooldown < 0)
      throw ValidationError("predictor config: counts must be positive");
    if (!(lr_start > 0 && min_lr > 0 && weight_decay >= 0 && rho > 0 && fb_eps >= 0 && leak >= 0))
      throw ValidationError("predictor config: rates must be positive");
    if (!(lr_factor > 0 && lr_factor < 1)) throw ValidationError("predictor config: lr_factor");
  }
};

struct SolverTrainConfig {
  Index hidden_dim = 256;
  double leak = kDefaultLeak;
  Index batch_size = 256;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double tau = 1e-8;
  long n_max_train = 2000;
  long total_steps = 20000;
  long warmup_delay = 100;
  double safeguard_delta = 1000;
  double alpha = 1.0;
  bool use_predictor = false;
  double rho = 1.0;
  ConvexifyMode convexify = ConvexifyMode::Auto;
  double fb_eps = kDefaultFbEps;
  std::uint64_t seed = 0;

  static SolverTrainConfig paper() {
    SolverTrainConfig c;
    c.hidden_dim = 2048;
    c.batch_size = 4096;
    c.total_steps = 100000;
    return c;
  }

  void validate() const {
    if (hidden_dim <= 0 || batch_size <= 0 || total_steps <= 0 || n_max_train <= 0 ||
        warmup_delay < 0)
      throw ValidationError("solver config: counts must be positive");
    if (!(tau > 0)) throw ValidationError("solver config: tau must be positive");
    if (!(safeguard_delta > 1)) throw ValidationError("solver config: safeguard_delta must be > 1");
    if (!(alpha > 0 && alpha <= 1)) throw ValidationError("solver config: alpha must lie in (0, 1]");
    if (!(lr > 0 && weight_decay >= 0 && rho > 0 && fb_eps >= 0 && leak >= 0))
      throw ValidationError("solver config: rates must be positive");
  }
};

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key) && !j[key].is_null()) field = j[key].get<T>();
}

inline void read_convexify(const nlohmann::json& j, ConvexifyMode& mode) {
  if (j.contains("convexify") && !j["convexify"].is_null())
    mode = parse_convexify_mode(j["convexify"].get<std::string>());
}

}  // namespace detail

inline nlohmann::json to_json(const PredictorTrainConfig& c) {
  return {{"hidden_dim", c.hidden_dim}, {"leak", c.leak},         {"batch_size", c.batch_size},
          {"lr_start", c.lr_start},     {"patience", c.patience}, {"cooldown", c.cooldown},
          {"lr_factor", c.lr_factor},   {"min_lr", c.min_lr},     {"max_epochs", c.max_epochs},
          {"weight_decay", c.weight_decay}, {"rho", c.rho},
          {"convexify", std::string(to_string(c.convexify))}, {"fb_eps", c.fb_eps},
          {"seed", c.seed}};
}

/// Fields missing from `j` keep the values already in `base`.
inline PredictorTrainConfig predictor_config_from_json(const nlohmann::json& j,
                                                       PredictorTrainConfig base = {}) {
  try {
    detail::read_opt(j, "hidden_dim", base.hidden_dim);
    detail::read_opt(j, "leak", base.leak);
    detail::read_opt(j, "batch_size", base.batch_size);
    detail::read_opt(j, "lr_start", base.lr_start);
    detail::read_opt(j, "patience", base.patience);
    detail::read_opt(j, "cooldown", base.cooldown);
    detail::read_opt(j, "lr_factor", base.lr_factor);
    detail::read_opt(j, "min_lr", base.min_lr);
    detail::read_opt(j, "max_epochs", base.max_epochs);
    detail::read_opt(j, "weight_decay", base.weight_decay);
    detail::read_opt(j, "rho", base.rho);
    detail::read_convexify(j, base.convexify);
    detail::read_opt(j, "fb_eps", base.fb_eps);
    detail::read_opt(j, "seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("predictor config: ") + e.what());
  }
  base.validate();
  return base;
}

inline nlohmann::json to_json(const SolverTrainConfig& c) {
  return {{"hidden_dim", c.hidden_dim},
          {"leak", c.leak},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"tau", c.tau},
          {"n_max_train", c.n_max_train},
          {"total_steps", c.total_steps},
          {"warmup_delay", c.warmup_delay},
          {"safeguard_delta", c.safeguard_delta},
          {"alpha", c.alpha},
          {"use_predictor", c.use_predictor},
          {"rho", c.rho},
          {"convexify", std::string(to_string(c.convexify))},
          {"fb_eps", c.fb_eps},
          {"seed", c.seed}};
}

inline SolverTrainConfig solver_config_from_json(const nlohmann::json& j,
                                                 SolverTrainConfig base = {}) {
  try {
    detail::read_opt(j, "hidden_dim", base.hidden_dim);
    detail::read_opt(j, "leak", base.leak);
    detail::read_opt(j, "batch_size", base.batch_size);
    detail::read_opt(j, "lr", base.lr);
    detail::read_opt(j, "weight_decay", base.weight_decay);
    detail::read_opt(j, "tau", base.tau);
    detail::read_opt(j, "n_max_train", base.n_max_train);
    detail::read_opt(j, "total_steps", base.total_steps);
    detail::read_opt(j, "warmup_delay", base.warmup_delay);
    detail::read_opt(j, "safeguard_delta", base.safeguard_delta);
    detail::read_opt(j, "alpha", base.alpha);
    detail::read_opt(j, "use_predictor", base.use_predictor);
    detail::read_opt(j, "rho", base.rho);
    detail::read_convexify(j, base.convexify);
    detail::read_opt(j, "fb_eps", base.fb_eps);
    detail::read_opt(j, "seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("solver config: ") + e.what());
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// History.

struct TrainHistoryRow {
  long step = 0;
  double loss = 0;
  double lr = 0;
  long resampled_count = 0;
  long nonfinite_count = 0;
};

using TrainHistory = std::vector<TrainHistoryRow>;
using TrainObserver = std::function<void(const TrainHistoryRow&)>;

inline std::string history_to_csv(const TrainHistory& history) {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss,lr,resampled_count,nonfinite_count\n";
  for (const auto& r : history)
    out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.resampled_count << ','
        << r.nonfinite_count << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Losses.

template <typename Scalar>
struct BatchLoss {
  Scalar loss = 0;
  Matrix<Scalar> grad;  // d loss / d (z or delta), one row per sample
  long nonfinite_count = 0;
};

/**
 * Predictor loss mean_t T(z_t, x_t) / n_z and its gradient with respect to
 * the predicted z. With convexification the objective is linearized at the
 * prediction itself; the linearization point is not differentiated.
 * Samples with a non-finite residual are excluded from the mean.
 */
template <typename Scalar, typename DerivedX, typename DerivedZ>
BatchLoss<Scalar> predictor_loss_and_grad(const ProblemInstance<Scalar>& inst,
                                          const Eigen::MatrixBase<DerivedX>& x_batch,
                                          const Eigen::MatrixBase<DerivedZ>& z_batch,
                                          const ConvexifySetting<Scalar>& conv = {},
                                          Scalar eps = Scalar(kDefaultFbEps)) {
  const Index n = x_batch.rows();
  const Index nz = inst.n_z();
  require_dims(z_batch.rows() == n && z_batch.cols() == nz && x_batch.cols() == inst.n_h,
               "predictor batch shapes");
  BatchLoss<Scalar> out;
  out.grad = Matrix<Scalar>::Zero(n, nz);
  std::vector<char> valid(size_t(n), 0);
  Scalar sum_t = 0;
  Index n_valid = 0;
  for (Index t = 0; t < n; ++t) {
    const Vector<Scalar> z = z_batch.row(t).transpose();
    const Vector<Scalar> x = x_batch.row(t).transpose();
    const auto conv_t = conv.at(z.head(inst.n_y));
    auto rg = kkt_residual_and_grad_t(inst, z, x, conv_t, eps);
    if (!rg.residual.finite() || !rg.grad_t.allFinite()) {
      ++out.nonfinite_count;
      continue;
    }
    valid[size_t(t)] = 1;
    sum_t += rg.residual.t_metric;
    out.grad.row(t) = rg.grad_t.transpose();
    ++n_valid;
  }
  if (n_valid == 0) {
    out.loss = std::numeric_limits<Scalar>::quiet_NaN();
    return out;
  }
  const Scalar scale = Scalar(1) / (Scalar(n_valid) * Scalar(nz));
  out.loss = sum_t * scale;
  out.grad *= scale;
  return out;
}

/// Clamp applied to T before taking log10 in the solver loss.
inline constexpr double kLogFloor = 1e-300;

/**
 * Solver loss mean_t log10(T(z_t + delta_t, x_t) / n_z) and its gradient with
 * respect to delta. With convexification the objective is linearized at the
 * current iterate y_t.
 */
template <typename Scalar, typename DerivedX, typename DerivedZ, typename DerivedD>
BatchLoss<Scalar> solver_loss_and_grad(const ProblemInstance<Scalar>& inst,
                                       const Eigen::MatrixBase<DerivedX>& x_batch,
                                       const Eigen::MatrixBase<DerivedZ>& z_batch,
                                       const Eigen::MatrixBase<DerivedD>& delta_batch,
                                       const ConvexifySetting<Scalar>& conv = {},
                                       Scalar eps = Scalar(kDefaultFbEps),
                                       const std::vector<char>* mask = nullptr) {
  const Index n = x_batch.rows();
  const Index nz = inst.n_z();
  require_dims(z_batch.rows() == n && z_batch.cols() == nz && delta_batch.rows() == n &&
                   delta_batch.cols() == nz && x_batch.cols() == inst.n_h,
               "solver batch shapes");
  const Scalar floor = std::max(Scalar(kLogFloor), std::numeric_limits<Scalar>::min());
  BatchLoss<Scalar> out;
  out.grad = Matrix<Scalar>::Zero(n, nz);
  Scalar sum_log = 0;
  Index n_valid = 0;
  const Scalar ln10 = Scalar(std::log(10.0));
  for (Index t = 0; t < n; ++t) {
    if (mask && !(*mask)[size_t(t)]) {
      ++out.nonfinite_count;
      continue;
    }
    const Vector<Scalar> z = z_batch.row(t).transpose();
    const Vector<Scalar> x = x_batch.row(t).transpose();
    const Vector<Scalar> z_new = z + delta_batch.row(t).transpose();
    const auto conv_t = conv.at(z.head(inst.n_y));
    auto rg = kkt_residual_and_grad_t(inst, z_new, x, conv_t, eps);
    if (!rg.residual.finite() || !rg.grad_t.allFinite()) {
      ++out.nonfinite_count;
      continue;
    }
    const Scalar t_val = std::max(rg.residual.t_metric, floor);
    sum_log += std::log10(t_val / Scalar(nz));
    out.grad.row(t) = rg.grad_t.transpose() / (t_val * ln10);
    ++n_valid;
  }
  if (n_valid == 0) {
    out.loss = std::numeric_limits<Scalar>::quiet_NaN();
    return out;
  }
  out.loss = sum_log / Scalar(n_valid);
  out.grad /= Scalar(n_valid);
  return out;
}

// ---------------------------------------------------------------------------
// Solver network input/output scaling.

/// [F / ||F||; ln ||F||]. The caller must treat ||F|| = 0 as converged.
template <typename Scalar>
Vector<Scalar> solver_input_scale(const KktResidual<Scalar>& f) {
  if (!(f.norm2 > Scalar(0)) || !std::isfinite(f.norm2))
    throw NumericalError("solver_input_scale: residual norm must be positive and finite");
  Vector<Scalar> u(f.f_vec.size() + 1);
  u.head(f.f_vec.size()) = f.f_vec / f.norm2;
  u[f.f_vec.size()] = std::log(f.norm2);
  return u;
}

/// Full solver network input [F / ||F||; ln ||F||; x].
template <typename Scalar, typename DerivedX>
Vector<Scalar> solver_input(const KktResidual<Scalar>& f, const Eigen::MatrixBase<DerivedX>& x) {
  const Index nz = f.f_vec.size();
  Vector<Scalar> u(nz + 1 + x.size());
  u.head(nz + 1) = solver_input_scale(f);
  u.tail(x.size()) = x;
  return u;
}

inline Index solver_in_dim(Index n_z, Index n_x) { return n_z + 1 + n_x; }

/// Step ||F|| * net([F/||F||; ln ||F||; x]).
template <typename Scalar, typename DerivedX>
Vector<Scalar> solver_predict_step(const MlpParams<Scalar>& solver, const KktResidual<Scalar>& f,
                                   const Eigen::MatrixBase<DerivedX>& x) {
  require_dims(solver.in_dim() == solver_in_dim(f.f_vec.size(), x.size()) &&
                   solver.out_dim() == f.f_vec.size(),
               "solver network shape");
  return f.norm2 * mlp_apply(solver, solver_input(f, x));
}

template <typename Scalar, typename DerivedX>
Vector<Scalar> predictor_predict(const MlpParams<Scalar>& predictor,
                                 const Eigen::MatrixBase<DerivedX>& x) {
  return mlp_apply(predictor, x);
}

// ---------------------------------------------------------------------------
// Predictor training.

template <typename Scalar = double>
struct TrainResult {
  MlpParams<Scalar> params;
  TrainHistory history;
  bool stopped_by_scheduler = false;
};

/// Consecutive non-finite losses tolerated before training aborts.
inline constexpr int kDivergencePatience = 10;

template <typename Scalar>
TrainResult<Scalar> train_predictor(const ProblemInstance<Scalar>& inst,
                                    const PredictorTrainConfig& cfg,
                                    const TrainObserver& observer = {}) {
  cfg.validate();
  TrainResult<Scalar> result;
  result.params = mlp_init<Scalar>(inst.n_h, cfg.hidden_dim, inst.n_z(), Scalar(cfg.leak),
                                   derive_seed(cfg.seed, 0));
  result.params.role = NetworkRole::Predictor;
  auto adam = AdamWState<Scalar>::for_params(result.params, Scalar(cfg.lr_start),
                                             Scalar(cfg.weight_decay));
  PlateauScheduler sched;
  sched.patience = cfg.patience;
  sched.cooldown = cfg.cooldown;
  sched.factor = cfg.lr_factor;
  sched.min_lr = cfg.min_lr;
  const ConvexifySetting<Scalar> conv{convexify_enabled(cfg.convexify, inst.kind),
                                      Scalar(cfg.rho)};

  Rng rng(derive_seed(cfg.seed, 1));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Matrix<Scalar> x(cfg.batch_size, inst.n_h);
  double lr = cfg.lr_start;
  int nonfinite_streak = 0;

  for (long epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (Index r = 0; r < x.rows(); ++r)
      for (Index c = 0; c < x.cols(); ++c) x(r, c) = Scalar(unit(rng));
    auto fwd = mlp_forward(result.params, x);
    auto lg = predictor_loss_and_grad(inst, x, fwd.output, conv, Scalar(cfg.fb_eps));

    TrainHistoryRow row{epoch, double(lg.loss), lr, long(cfg.batch_size), lg.nonfinite_count};
    if (!std::isfinite(double(lg.loss))) {
      if (++nonfinite_streak >= kDivergencePatience)
        throw NumericalError("predictor training diverged at epoch " + std::to_string(epoch));
      result.history.push_back(row);
      if (observer) observer(row);
      continue;
    }
    nonfinite_streak = 0;
    auto grads = mlp_backward(result.params, fwd.cache, lg.grad);
    adam.lr = Scalar(lr);
    adamw_step(adam, result.params, grads);
    result.history.push_back(row);
    if (observer) observer(row);

    const auto decision = plateau_step(sched, double(lg.loss), lr);
    if (decision.stop) {
      result.stopped_by_scheduler = true;
      break;
    }
    lr = decision.lr;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Solver training.

/// Training-time population of iterates advanced by the solver network.
template <typename Scalar = double>
struct IteratePool {
  Matrix<Scalar> x;        // batch x n_h
  Matrix<Scalar> z;        // batch x n_z
  std::vector<long> k;     // iterations since (re)sampling
  Vector<Scalar> t0;       // T at (re)sampling
  Vector<Scalar> t;        // current T
  Index size() const { return x.rows(); }
};

/// Inspection hook called after every training step (tests use it to check
/// pool invariants).
template <typename Scalar>
using PoolObserver = std::function<void(long step, const IteratePool<Scalar>&)>;

namespace detail {

template <typename Scalar>
class PoolSampler {
 public:
  PoolSampler(const ProblemInstance<Scalar>& inst, const MlpParams<Scalar>* predictor,
              std::uint64_t seed, Scalar eps)
      : inst_(inst), predictor_(predictor), rng_(seed), eps_(eps) {}

  void resample(IteratePool<Scalar>& pool, Index slot) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index c = 0; c < inst_.n_h; ++c) pool.x(slot, c) = Scalar(unit(rng_));
    const Vector<Scalar> x = pool.x.row(slot).transpose();
    if (predictor_) {
      pool.z.row(slot) = predictor_predict(*predictor_, x).transpose();
    } else {
      for (Index c = 0; c < inst_.n_z(); ++c) pool.z(slot, c) = Scalar(normal(rng_));
    }
    pool.k[size_t(slot)] = 0;
    const Vector<Scalar> z = pool.z.row(slot).transpose();
    const Scalar t = kkt_residual(inst_, z, x, Convexification<Scalar>{}, eps_).t_metric;
    pool.t0[slot] = t;
    pool.t[slot] = t;
  }

 private:
  const ProblemInstance<Scalar>& inst_;
  const MlpParams<Scalar>* predictor_;
  Rng rng_;
  Scalar eps_;
};

}  // namespace detail

/**
 * Trains the step network on its own iterates.
 *
 * Each step evaluates the true residual over the pool, predicts steps, and
 * updates the network on the log-scaled metric at z + delta. After
 * warmup_delay steps the (pre-update) steps are also applied to the pool: an
 * update is rejected when it raises T above safeguard_delta * t0, the
 * iteration counter advances either way, and a slot is resampled once it
 * reaches n_max_train iterations or T <= tau.
 */
template <typename Scalar>
TrainResult<Scalar> train_solver(const ProblemInstance<Scalar>& inst, const SolverTrainConfig& cfg,
                                 const MlpParams<Scalar>* predictor = nullptr,
                                 const TrainObserver& observer = {},
                                 const PoolObserver<Scalar>& pool_observer = {}) {
  cfg.validate();
  if (cfg.use_predictor != (predictor != nullptr))
    throw ValidationError("train_solver: predictor must be given iff use_predictor is set");
  if (predictor)
    require_dims(predictor->in_dim() == inst.n_h && predictor->out_dim() == inst.n_z(),
                 "predictor network shape");

  const Index nz = inst.n_z();
  const Index nx = inst.n_h;
  const Index batch = cfg.batch_size;
  const Scalar eps = Scalar(cfg.fb_eps);
  const ConvexifySetting<Scalar> conv{convexify_enabled(cfg.convexify, inst.kind),
                                      Scalar(cfg.rho)};

  TrainResult<Scalar> result;
  result.params = mlp_init<Scalar>(solver_in_dim(nz, nx), cfg.hidden_dim, nz, Scalar(cfg.leak),
                                   derive_seed(cfg.seed, 0));
  result.params.role = NetworkRole::Solver;
  auto adam = AdamWState<Scalar>::for_params(result.params, Scalar(cfg.lr),
                                             Scalar(cfg.weight_decay));

  IteratePool<Scalar> pool;
  pool.x.resize(batch, nx);
  pool.z.resize(batch, nz);
  pool.k.assign(size_t(batch), 0);
  pool.t0.resize(batch);
  pool.t.resize(batch);
  detail::PoolSampler<Scalar> sampler(inst, predictor, derive_seed(cfg.seed, 1), eps);
  for (Index s = 0; s < batch; ++s) sampler.resample(pool, s);

  Matrix<Scalar> input(batch, solver_in_dim(nz, nx));
  Vector<Scalar> norms(batch);
  std::vector<char> mask(static_cast<size_t>(batch));
  int nonfinite_streak = 0;
  const Convexification<Scalar> no_conv{};

  for (long step = 1; step <= cfg.total_steps; ++step) {
    for (Index s = 0; s < batch; ++s) {
      const Vector<Scalar> z = pool.z.row(s).transpose();
      const Vector<Scalar> x = pool.x.row(s).transpose();
      const auto f = kkt_residual(inst, z, x, no_conv, eps);
      const bool ok = f.finite() && f.norm2 > Scalar(0);
      mask[size_t(s)] = ok;
      if (ok) {
        input.row(s).head(nz + 1) = solver_input_scale(f).transpose();
        norms[s] = f.norm2;
      } else {
        input.row(s).head(nz + 1).setZero();
        norms[s] = 0;
      }
      input.row(s).tail(nx) = pool.x.row(s);
    }
    auto fwd = mlp_forward(result.params, input);
    const Matrix<Scalar> delta = norms.asDiagonal() * fwd.output;
    auto lg = solver_loss_and_grad(inst, pool.x, pool.z, delta, conv, eps, &mask);

    TrainHistoryRow row{step, double(lg.loss), cfg.lr, 0, lg.nonfinite_count};
    if (!std::isfinite(double(lg.loss))) {
      if (++nonfinite_streak >= kDivergencePatience)
        throw NumericalError("solver training diverged at step " + std::to_string(step));
    } else {
      nonfinite_streak = 0;
      const Matrix<Scalar> d_out = norms.asDiagonal() * lg.grad;
      auto grads = mlp_backward(result.params, fwd.cache, d_out);
      adamw_step(adam, result.params, grads);
    }

    if (step > cfg.warmup_delay) {
      for (Index s = 0; s < batch; ++s) {
        if (mask[size_t(s)]) {
          const Vector<Scalar> x = pool.x.row(s).transpose();
          const Vector<Scalar> z_new =
              pool.z.row(s).transpose() + Scalar(cfg.alpha) * delta.row(s).transpose();
          const Scalar t_new = kkt_residual(inst, z_new, x, no_conv, eps).t_metric;
          if (t_new <= Scalar(cfg.safeguard_delta) * pool.t0[s]) {
            pool.z.row(s) = z_new.transpose();
            pool.t[s] = t_new;
          }
        }
        ++pool.k[size_t(s)];
        if (pool.k[size_t(s)] >= cfg.n_max_train || pool.t[s] <= Scalar(cfg.tau)) {
          sampler.resample(pool, s);
          ++row.resampled_count;
        }
      }
    }
    result.history.push_back(row);
    if (observer) observer(row);
    if (pool_observer) pool_observer(step, pool);
  }
  return result;
}

}  // namespace lisco
