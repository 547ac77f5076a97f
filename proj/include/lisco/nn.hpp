#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>

#include <json.hpp>

#include "lisco/common.hpp"
#include "lisco/problems.hpp"

namespace lisco {

inline constexpr double kDefaultLeak = 0.01;

enum class NetworkRole { Unspecified, Predictor, Solver };

inline std::string_view to_string(NetworkRole role) {
  switch (role) {
    case NetworkRole::Predictor: return "predictor";
    case NetworkRole::Solver: return "solver";
    case NetworkRole::Unspecified: break;
  }
  return "unspecified";
}

inline NetworkRole parse_network_role(std::string_view tag) {
  if (tag == "predictor") return NetworkRole::Predictor;
  if (tag == "solver") return NetworkRole::Solver;
  throw ValidationError("unknown network role '" + std::string(tag) + "'");
}

/// Weights of a one-hidden-layer network u -> W2 leaky(W1 u + b1) + b2.
template <typename Scalar = double>
struct MlpParams {
  Matrix<Scalar> w1;  // hidden x in
  Vector<Scalar> b1;
  Matrix<Scalar> w2;  // out x hidden
  Vector<Scalar> b2;
  Scalar leak = Scalar(kDefaultLeak);
  NetworkRole role = NetworkRole::Unspecified;

  Index in_dim() const { return w1.cols(); }
  Index hidden_dim() const { return w1.rows(); }
  Index out_dim() const { return w2.rows(); }
  Index parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  template <typename Other>
  MlpParams<Other> cast() const {
    return {w1.template cast<Other>(), b1.template cast<Other>(), w2.template cast<Other>(),
            b2.template cast<Other>(), Other(leak), role};
  }
};

/// Gradient buffers shaped like MlpParams (also used for Adam moments).
template <typename Scalar = double>
struct MlpGradients {
  Matrix<Scalar> w1;
  Vector<Scalar> b1;
  Matrix<Scalar> w2;
  Vector<Scalar> b2;

  static MlpGradients zeros_like(const MlpParams<Scalar>& p) {
    return {Matrix<Scalar>::Zero(p.w1.rows(), p.w1.cols()), Vector<Scalar>::Zero(p.b1.size()),
            Matrix<Scalar>::Zero(p.w2.rows(), p.w2.cols()), Vector<Scalar>::Zero(p.b2.size())};
  }

  bool all_finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
  }
};

constexpr Index mlp_parameter_count(Index in, Index hidden, Index out) {
  return in * hidden + hidden + hidden * out + out;
}

/// Weights uniform in +-sqrt(1/fan_in) per layer, biases zero.
template <typename Scalar = double>
MlpParams<Scalar> mlp_init(Index in_dim, Index hidden_dim, Index out_dim,
                           Scalar leak = Scalar(kDefaultLeak), std::uint64_t seed = 0) {
  if (in_dim <= 0 || hidden_dim <= 0 || out_dim <= 0)
    throw ValidationError("mlp_init: dimensions must be positive");
  Rng rng(seed);
  MlpParams<Scalar> p;
  p.leak = leak;
  auto fill = [&rng](Matrix<Scalar>& m, Index rows, Index cols) {
    const double bound = std::sqrt(1.0 / double(cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    m.resize(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = Scalar(dist(rng));
  };
  fill(p.w1, hidden_dim, in_dim);
  p.b1 = Vector<Scalar>::Zero(hidden_dim);
  fill(p.w2, out_dim, hidden_dim);
  p.b2 = Vector<Scalar>::Zero(out_dim);
  return p;
}

template <typename Scalar>
struct MlpCache {
  Matrix<Scalar> input;       // n x in
  Matrix<Scalar> pre;         // n x hidden
  Matrix<Scalar> activation;  // n x hidden
};

template <typename Scalar>
struct MlpOutput {
  Matrix<Scalar> output;  // n x out
  MlpCache<Scalar> cache;
};

/// Rowwise forward pass over a batch (one sample per row).
template <typename Scalar, typename Derived>
MlpOutput<Scalar> mlp_forward(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& input) {
  require_dims(input.cols() == p.in_dim(), "mlp_forward input width");
  if (!input.allFinite()) throw NumericalError("mlp_forward: non-finite input");
  MlpOutput<Scalar> out;
  out.cache.input = input;
  out.cache.pre.noalias() = out.cache.input * p.w1.transpose();
  out.cache.pre.rowwise() += p.b1.transpose();
  const Scalar leak = p.leak;
  out.cache.activation =
      out.cache.pre.unaryExpr([leak](Scalar t) { return t >= Scalar(0) ? t : leak * t; });
  out.output.noalias() = out.cache.activation * p.w2.transpose();
  out.output.rowwise() += p.b2.transpose();
  return out;
}

/// Forward pass for a single sample.
template <typename Scalar, typename Derived>
Vector<Scalar> mlp_apply(const MlpParams<Scalar>& p, const Eigen::MatrixBase<Derived>& u) {
  require_dims(u.size() == p.in_dim(), "mlp_apply input length");
  Vector<Scalar> hidden = p.w1 * u + p.b1;
  const Scalar leak = p.leak;
  hidden = hidden.unaryExpr([leak](Scalar t) { return t >= Scalar(0) ? t : leak * t; });
  return p.w2 * hidden + p.b2;
}

/// Reverse-mode gradients summed over the batch; callers pre-scale d_out.
template <typename Scalar, typename Derived>
MlpGradients<Scalar> mlp_backward(const MlpParams<Scalar>& p, const MlpCache<Scalar>& cache,
                                  const Eigen::MatrixBase<Derived>& d_out) {
  require_dims(cache.pre.cols() == p.hidden_dim() && cache.input.cols() == p.in_dim(),
               "mlp_backward cache");
  require_dims(d_out.rows() == cache.input.rows() && d_out.cols() == p.out_dim(),
               "mlp_backward d_out");
  MlpGradients<Scalar> g;
  g.w2.noalias() = d_out.transpose() * cache.activation;
  g.b2 = d_out.colwise().sum().transpose();
  Matrix<Scalar> d_pre = d_out * p.w2;
  const Scalar leak = p.leak;
  d_pre.array() *=
      cache.pre.unaryExpr([leak](Scalar t) { return t >= Scalar(0) ? Scalar(1) : leak; }).array();
  g.w1.noalias() = d_pre.transpose() * cache.input;
  g.b1 = d_pre.colwise().sum().transpose();
  return g;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay (PyTorch defaults).

template <typename Scalar = double>
struct AdamWState {
  long step_count = 0;
  MlpGradients<Scalar> m;
  MlpGradients<Scalar> v;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps_adam = Scalar(1e-8);
  Scalar weight_decay = Scalar(1e-3);
  Scalar lr = Scalar(1e-3);

  static AdamWState for_params(const MlpParams<Scalar>& p, Scalar lr, Scalar weight_decay) {
    AdamWState s;
    s.m = MlpGradients<Scalar>::zeros_like(p);
    s.v = MlpGradients<Scalar>::zeros_like(p);
    s.lr = lr;
    s.weight_decay = weight_decay;
    return s;
  }
};

/// One AdamW update of a single tensor; step is the 1-based step count.
template <typename Scalar, typename DTheta, typename DGrad, typename DM, typename DV>
void adamw_update_tensor(Eigen::DenseBase<DTheta>& theta, const Eigen::DenseBase<DGrad>& grad,
                         Eigen::DenseBase<DM>& m, Eigen::DenseBase<DV>& v, long step, Scalar lr,
                         Scalar beta1, Scalar beta2, Scalar eps_adam, Scalar weight_decay) {
  const Scalar bias1 = Scalar(1) - std::pow(beta1, Scalar(step));
  const Scalar bias2 = Scalar(1) - std::pow(beta2, Scalar(step));
  auto th = theta.derived().array();
  const auto gr = grad.derived().array();
  auto ma = m.derived().array();
  auto va = v.derived().array();
  ma = beta1 * ma + (Scalar(1) - beta1) * gr;
  va = beta2 * va + (Scalar(1) - beta2) * gr.square();
  th -= lr * weight_decay * th;
  th -= lr * (ma / bias1) / ((va / bias2).sqrt() + eps_adam);
}

template <typename Scalar>
void adamw_step(AdamWState<Scalar>& s, MlpParams<Scalar>& p, const MlpGradients<Scalar>& g) {
  if (!g.all_finite()) throw NumericalError("adamw_step: non-finite gradient");
  require_dims(g.w1.rows() == p.w1.rows() && g.w1.cols() == p.w1.cols() &&
                   g.w2.rows() == p.w2.rows() && g.w2.cols() == p.w2.cols() &&
                   g.b1.size() == p.b1.size() && g.b2.size() == p.b2.size(),
               "adamw_step gradient shape");
  ++s.step_count;
  adamw_update_tensor(p.w1, g.w1, s.m.w1, s.v.w1, s.step_count, s.lr, s.beta1, s.beta2,
                      s.eps_adam, s.weight_decay);
  adamw_update_tensor(p.b1, g.b1, s.m.b1, s.v.b1, s.step_count, s.lr, s.beta1, s.beta2,
                      s.eps_adam, s.weight_decay);
  adamw_update_tensor(p.w2, g.w2, s.m.w2, s.v.w2, s.step_count, s.lr, s.beta1, s.beta2,
                      s.eps_adam, s.weight_decay);
  adamw_update_tensor(p.b2, g.b2, s.m.b2, s.v.b2, s.step_count, s.lr, s.beta1, s.beta2,
                      s.eps_adam, s.weight_decay);
}

// ---------------------------------------------------------------------------
// Reduce-on-plateau learning-rate schedule.

struct PlateauScheduler {
  double best_loss = std::numeric_limits<double>::infinity();
  long epochs_since_improvement = 0;
  long patience = 1000;
  double factor = 0.1;
  long cooldown = 100;
  long cooldown_remaining = 0;
  double min_lr = 1e-8;
};

struct PlateauDecision {
  double lr;
  bool reduced = false;
  bool stop = false;  // plateau reached while already at min_lr
};

/**
 * Feeds one epoch loss. Improvement is strict (loss < best). Epochs spent in
 * cooldown do not count towards patience. A plateau at min_lr (within a
 * relative 1e-6, to absorb repeated multiplication by factor) requests a stop.
 */
inline PlateauDecision plateau_step(PlateauScheduler& s, double epoch_loss, double lr) {
  if (!(s.factor > 0.0 && s.factor < 1.0))
    throw ValidationError("plateau factor must lie in (0, 1)");
  PlateauDecision d{lr};
  if (epoch_loss < s.best_loss) {
    s.best_loss = epoch_loss;
    s.epochs_since_improvement = 0;
  } else {
    ++s.epochs_since_improvement;
  }
  if (s.cooldown_remaining > 0) {
    --s.cooldown_remaining;
    s.epochs_since_improvement = 0;
  }
  if (s.epochs_since_improvement >= s.patience) {
    s.epochs_since_improvement = 0;
    if (lr <= s.min_lr * (1.0 + 1e-6)) {
      d.stop = true;
      return d;
    }
    d.lr = std::max(lr * s.factor, s.min_lr);
    d.reduced = true;
    s.cooldown_remaining = s.cooldown;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Weight files.

inline constexpr int kWeightFormatVersion = 1;

class RoleMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

template <typename Scalar>
nlohmann::json weights_to_json(const MlpParams<Scalar>& p, nlohmann::json metadata = {}) {
  nlohmann::json j;
  j["format_version"] = kWeightFormatVersion;
  j["role"] = std::string(to_string(p.role));
  j["in_dim"] = p.in_dim();
  j["hidden_dim"] = p.hidden_dim();
  j["out_dim"] = p.out_dim();
  j["leak"] = double(p.leak);
  j["w1_row_major"] = detail::to_json_array(p.w1);
  j["b1"] = detail::to_json_array(p.b1);
  j["w2_row_major"] = detail::to_json_array(p.w2);
  j["b2"] = detail::to_json_array(p.b2);
  if (metadata.is_null()) metadata = nlohmann::json::object();
  metadata["role"] = std::string(to_string(p.role));
  metadata["leak"] = double(p.leak);
  if (!metadata.contains("residual_row_order_version")) metadata["residual_row_order_version"] = 1;
  j["metadata"] = std::move(metadata);
  return j;
}

/// Parses a weight document; `expected` other than Unspecified enforces role.
template <typename Scalar = double>
MlpParams<Scalar> weights_from_json(const nlohmann::json& j,
                                    NetworkRole expected = NetworkRole::Unspecified) {
  try {
    if (j.at("format_version").get<int>() != kWeightFormatVersion)
      throw ValidationError("unsupported weight format_version");
    MlpParams<Scalar> p;
    p.role = parse_network_role(j.at("role").get<std::string>());
    if (expected != NetworkRole::Unspecified && p.role != expected)
      throw RoleMismatch("expected " + std::string(to_string(expected)) + " weights, got " +
                         std::string(to_string(p.role)));
    const Index in = j.at("in_dim").get<Index>();
    const Index hidden = j.at("hidden_dim").get<Index>();
    const Index out = j.at("out_dim").get<Index>();
    if (in <= 0 || hidden <= 0 || out <= 0) throw DimensionMismatch("non-positive layer size");
    p.leak = Scalar(j.at("leak").get<double>());
    p.w1 = detail::matrix_from_json<Scalar>(j.at("w1_row_major"), hidden, in, "w1");
    p.b1 = detail::vector_from_json<Scalar>(j.at("b1"), hidden, "b1");
    p.w2 = detail::matrix_from_json<Scalar>(j.at("w2_row_major"), out, hidden, "w2");
    p.b2 = detail::vector_from_json<Scalar>(j.at("b2"), out, "b2");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed weight file: ") + e.what());
  }
}

template <typename Scalar>
void save_weights(const MlpParams<Scalar>& p, const std::string& path,
                  nlohmann::json metadata = {}) {
  detail::write_text_file(path, weights_to_json(p, std::move(metadata)).dump() + "\n");
}

template <typename Scalar = double>
MlpParams<Scalar> load_weights(const std::string& path,
                               NetworkRole expected = NetworkRole::Unspecified) {
  return weights_from_json<Scalar>(detail::read_json_file(path), expected);
}

/// Metadata block of a weight file, without parsing the tensors.
inline nlohmann::json load_weight_metadata(const std::string& path) {
  const auto j = detail::read_json_file(path);
  return j.value("metadata", nlohmann::json::object());
}

}  // namespace lisco
