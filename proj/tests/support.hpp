#pragma once

// Finite-difference oracles and small fixtures shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>

#include "lisco/bench.hpp"

namespace lisco::test {

/// ||a - b||_inf / max(1, ||b||_inf).
template <typename DA, typename DB>
double rel_err(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const double scale = std::max(1.0, double(b.cwiseAbs().maxCoeff()));
  return double((a - b).cwiseAbs().maxCoeff()) / scale;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

/// Central differences of a scalar function.
inline Vector<double> fd_gradient(const std::function<double(const Vector<double>&)>& f,
                                  const Vector<double>& u, double h = 1e-6) {
  Vector<double> g(u.size());
  Vector<double> w = u;
  for (Index i = 0; i < u.size(); ++i) {
    w[i] = u[i] + h;
    const double fp = f(w);
    w[i] = u[i] - h;
    const double fm = f(w);
    w[i] = u[i];
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// Central differences of a vector function; column j is d f / d u_j.
inline Matrix<double> fd_jacobian(const std::function<Vector<double>(const Vector<double>&)>& f,
                                  const Vector<double>& u, double h = 1e-6) {
  const Vector<double> f0 = f(u);
  Matrix<double> jac(f0.size(), u.size());
  Vector<double> w = u;
  for (Index j = 0; j < u.size(); ++j) {
    w[j] = u[j] + h;
    const Vector<double> fp = f(w);
    w[j] = u[j] - h;
    const Vector<double> fm = f(w);
    w[j] = u[j];
    jac.col(j) = (fp - fm) / (2 * h);
  }
  return jac;
}

inline Vector<double> normal_vector(Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline Vector<double> uniform_vector(Index n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline constexpr ProblemKind kAllKinds[] = {ProblemKind::ConvexQp, ProblemKind::NonconvexQp,
                                            ProblemKind::Rosenbrock};

/// min 1/2 y^2 subject to y >= 1, written as -y <= -1 with no equalities.
inline ProblemInstance<double> one_dim_qp() {
  ProblemInstance<double> inst;
  inst.kind = ProblemKind::ConvexQp;
  inst.n_y = 1;
  inst.n_h = 0;
  inst.n_g = 1;
  inst.q_diag = Vector<double>::Ones(1);
  inst.p = Vector<double>::Zero(1);
  inst.a_mat.resize(0, 1);
  inst.g_mat = Matrix<double>::Constant(1, 1, -1.0);
  inst.h_vec = Vector<double>::Constant(1, -1.0);
  inst.validate();
  return inst;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("lisco_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Plain scalar Adam with decoupled decay, written independently of nn.hpp.
struct ScalarAdamW {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, wd;
  double m = 0, v = 0;
  int t = 0;

  double step(double theta, double grad) {
    ++t;
    theta = theta - lr * wd * theta;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad * grad;
    const double mh = m / (1 - std::pow(beta1, t));
    const double vh = v / (1 - std::pow(beta2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

// Flattens parameters in the order w1, b1, w2, b2 and back.
inline Vector<double> flatten(const MlpParams<double>& p) {
  Vector<double> v(p.parameter_count());
  Index k = 0;
  for (Index r = 0; r < p.w1.rows(); ++r)
    for (Index c = 0; c < p.w1.cols(); ++c) v[k++] = p.w1(r, c);
  for (Index i = 0; i < p.b1.size(); ++i) v[k++] = p.b1[i];
  for (Index r = 0; r < p.w2.rows(); ++r)
    for (Index c = 0; c < p.w2.cols(); ++c) v[k++] = p.w2(r, c);
  for (Index i = 0; i < p.b2.size(); ++i) v[k++] = p.b2[i];
  return v;
}

inline MlpParams<double> unflatten(const MlpParams<double>& shape, const Vector<double>& v) {
  MlpParams<double> p = shape;
  Index k = 0;
  for (Index r = 0; r < p.w1.rows(); ++r)
    for (Index c = 0; c < p.w1.cols(); ++c) p.w1(r, c) = v[k++];
  for (Index i = 0; i < p.b1.size(); ++i) p.b1[i] = v[k++];
  for (Index r = 0; r < p.w2.rows(); ++r)
    for (Index c = 0; c < p.w2.cols(); ++c) p.w2(r, c) = v[k++];
  for (Index i = 0; i < p.b2.size(); ++i) p.b2[i] = v[k++];
  return p;
}

inline Vector<double> flatten(const MlpGradients<double>& g) {
  MlpParams<double> p;
  p.w1 = g.w1;
  p.b1 = g.b1;
  p.w2 = g.w2;
  p.b2 = g.b2;
  return flatten(p);
}
/// Solver loss as a function of the network weights: residual scaling,
/// forward pass, step = ||F|| * output, loss at z + step.
inline double solver_pipeline_loss(const ProblemInstance<double>& inst,
                                   const MlpParams<double>& net, const Matrix<double>& xs,
                                   const Matrix<double>& zs, const ConvexifySetting<double>& conv) {
  Matrix<double> input(xs.rows(), net.in_dim());
  Vector<double> norms(xs.rows());
  for (Index r = 0; r < xs.rows(); ++r) {
    const auto f = kkt_residual(inst, Vector<double>(zs.row(r).transpose()),
                                Vector<double>(xs.row(r).transpose()));
    input.row(r) = solver_input(f, Vector<double>(xs.row(r).transpose())).transpose();
    norms[r] = f.norm2;
  }
  const Matrix<double> delta = norms.asDiagonal() * mlp_forward(net, input).output;
  return solver_loss_and_grad(inst, xs, zs, delta, conv).loss;
}

/// Analytic weight gradient of solver_pipeline_loss through mlp_backward.
inline Vector<double> solver_pipeline_grad(const ProblemInstance<double>& inst,
                                           const MlpParams<double>& net, const Matrix<double>& xs,
                                           const Matrix<double>& zs,
                                           const ConvexifySetting<double>& conv) {
  Matrix<double> input(xs.rows(), net.in_dim());
  Vector<double> norms(xs.rows());
  for (Index r = 0; r < xs.rows(); ++r) {
    const auto f = kkt_residual(inst, Vector<double>(zs.row(r).transpose()),
                                Vector<double>(xs.row(r).transpose()));
    input.row(r) = solver_input(f, Vector<double>(xs.row(r).transpose())).transpose();
    norms[r] = f.norm2;
  }
  auto fwd = mlp_forward(net, input);
  const Matrix<double> delta = norms.asDiagonal() * fwd.output;
  auto lg = solver_loss_and_grad(inst, xs, zs, delta, conv);
  return flatten(mlp_backward(net, fwd.cache, Matrix<double>(norms.asDiagonal() * lg.grad)));
}

inline double predictor_pipeline_loss(const ProblemInstance<double>& inst,
                                      const MlpParams<double>& net, const Matrix<double>& xs,
                                      const ConvexifySetting<double>& conv) {
  return predictor_loss_and_grad(inst, xs, mlp_forward(net, xs).output, conv).loss;
}

inline Vector<double> predictor_pipeline_grad(const ProblemInstance<double>& inst,
                                              const MlpParams<double>& net,
                                              const Matrix<double>& xs,
                                              const ConvexifySetting<double>& conv) {
  auto fwd = mlp_forward(net, xs);
  auto lg = predictor_loss_and_grad(inst, xs, fwd.output, conv);
  return flatten(mlp_backward(net, fwd.cache, lg.grad));
}

/// Relative error of the analytic solver-loss weight gradient against
/// central differences, for a network with input width 7 and hidden width 5.
inline double tiny_solver_pipeline_error(ProblemKind kind, std::uint64_t seed,
                                         const ConvexifySetting<double>& conv) {
  // n_z + 1 + n_h = 7 with n_y = 2, n_h = 1, n_g = 2.
  const auto inst = gen_instance<double>(kind, 2, 1, 2, seed);
  auto net = mlp_init<double>(7, 5, inst.n_z(), 0.01, derive_seed(seed, 1));
  Rng rng(derive_seed(seed, 2));
  net.b1 = normal_vector(5, rng, 0.1);
  const Index batch = 4;
  Matrix<double> xs(batch, 1), zs(batch, inst.n_z());
  for (Index r = 0; r < batch; ++r) {
    xs.row(r) = uniform_vector(1, rng).transpose();
    zs.row(r) = normal_vector(inst.n_z(), rng).transpose();
  }
  const Vector<double> analytic = solver_pipeline_grad(inst, net, xs, zs, conv);
  auto loss = [&](const Vector<double>& theta) {
    return solver_pipeline_loss(inst, unflatten(net, theta), xs, zs, conv);
  };
  const Vector<double> numeric = fd_gradient(loss, flatten(net), 1e-6);
  return rel_err(analytic, numeric);
}

/// Largest ||y_newton - y_enum||_inf over random small convex QPs with
/// n_y <= 6, n_h <= 2, n_g <= 4, a few parameter vectors each. The default
/// Newton tolerance T <= 1e-12 only pins y to about 1e-6, so Newton runs to
/// T <= 1e-24 here.
inline double oracle_crosscheck_error(int n_instances, std::uint64_t seed, int x_per_instance = 3) {
  NewtonOptions opts;
  opts.tol = 1e-24;
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < n_instances; ++i) {
    const Index ny = std::uniform_int_distribution<Index>(2, 6)(rng);
    const Index nh = std::uniform_int_distribution<Index>(1, std::min<Index>(2, ny - 1))(rng);
    const Index ng = std::uniform_int_distribution<Index>(1, 4)(rng);
    const auto inst = gen_instance<double>(ProblemKind::ConvexQp, ny, nh, ng, rng());
    const auto xs = sample_params(inst, x_per_instance, rng()).x;
    for (Index r = 0; r < xs.rows(); ++r) {
      const Vector<double> x = xs.row(r).transpose();
      const auto newton =
          newton_fb_solve(inst, x, Vector<double>(Vector<double>::Zero(inst.n_z())), opts);
      if (newton.status != OracleStatus::Converged) return std::numeric_limits<double>::infinity();
      const auto exact = active_set_enumerate(inst, x);
      worst = std::max(worst, (newton.z_star.head(ny) - exact.z_star.head(ny)).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

}  // namespace lisco::test
