#pragma once

#include <cmath>

#include "lisco/common.hpp"
#include "lisco/problems.hpp"

namespace lisco {

/// FB smoothing used throughout training, inference and the Newton oracle.
inline constexpr double kDefaultFbEps = 1e-6;

/// Version tag of the residual row layout [stationarity; equality; FB].
/// Stored in weight files: a solver network is only valid for one layout.
inline constexpr int kResidualRowOrderVersion = 1;

/**
 * Primal-dual point z = (y, nu, lambda) stored contiguously.
 *
 * lambda carries no sign constraint; the FB rows of the residual encode dual
 * feasibility implicitly.
 */
template <typename Scalar = double>
class PrimalDual {
 public:
  PrimalDual() = default;
  PrimalDual(Index n_y, Index n_h, Index n_g)
      : data_(Vector<Scalar>::Zero(n_y + n_h + n_g)), n_y_(n_y), n_h_(n_h), n_g_(n_g) {}
  explicit PrimalDual(const ProblemInstance<Scalar>& inst)
      : PrimalDual(inst.n_y, inst.n_h, inst.n_g) {}

  template <typename Derived>
  PrimalDual(const ProblemInstance<Scalar>& inst, const Eigen::MatrixBase<Derived>& stacked)
      : data_(stacked), n_y_(inst.n_y), n_h_(inst.n_h), n_g_(inst.n_g) {
    require_dims(data_.size() == n_z(), "PrimalDual stacked length");
  }

  Index n_y() const { return n_y_; }
  Index n_h() const { return n_h_; }
  Index n_g() const { return n_g_; }
  Index n_z() const { return n_y_ + n_h_ + n_g_; }

  auto y() { return data_.segment(0, n_y_); }
  auto y() const { return data_.segment(0, n_y_); }
  auto nu() { return data_.segment(n_y_, n_h_); }
  auto nu() const { return data_.segment(n_y_, n_h_); }
  auto lambda() { return data_.segment(n_y_ + n_h_, n_g_); }
  auto lambda() const { return data_.segment(n_y_ + n_h_, n_g_); }

  Vector<Scalar>& stacked() { return data_; }
  const Vector<Scalar>& stacked() const { return data_; }

 private:
  Vector<Scalar> data_;
  Index n_y_ = 0;
  Index n_h_ = 0;
  Index n_g_ = 0;
};

/// Residual vector with its cached norm and metric T = 0.5 ||F||^2.
template <typename Scalar = double>
struct KktResidual {
  Vector<Scalar> f_vec;
  Scalar norm2 = 0;
  Scalar t_metric = 0;

  KktResidual() = default;
  explicit KktResidual(Vector<Scalar> f)
      : f_vec(std::move(f)), norm2(f_vec.norm()), t_metric(Scalar(0.5) * f_vec.squaredNorm()) {}

  bool finite() const { return std::isfinite(norm2) && f_vec.allFinite(); }
};

/// Objective linearized at y_lin plus rho ||y - y_lin||^2. Applies to the
/// objective only; the constraints are affine.
template <typename Scalar = double>
struct Convexification {
  bool enabled = false;
  Scalar rho = 1;
  Vector<Scalar> y_lin;

  static Convexification off() { return {}; }
  template <typename Derived>
  static Convexification at(const Eigen::MatrixBase<Derived>& y_lin, Scalar rho) {
    if (!(rho > 0)) throw ValidationError("convexification rho must be positive");
    return {true, rho, Vector<Scalar>(y_lin)};
  }
};

/// Signed, smoothed Fischer-Burmeister function:
/// zero iff lambda >= 0, g <= 0, lambda * g = 0 (when eps = 0).
template <typename Scalar>
Scalar fb(Scalar lambda, Scalar g, Scalar eps) {
  return lambda - g - std::hypot(lambda, g, eps);
}

template <typename Scalar>
struct FbPartials {
  Scalar d_lambda;
  Scalar d_g;
};

class SingularPoint : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

template <typename Scalar>
FbPartials<Scalar> fb_partials(Scalar lambda, Scalar g, Scalar eps) {
  const Scalar r = std::hypot(lambda, g, eps);
  if (r == Scalar(0)) throw SingularPoint("fb_partials: lambda = g = eps = 0");
  return {Scalar(1) - lambda / r, Scalar(-1) - g / r};
}

namespace detail {

template <typename Scalar, typename DerivedZ, typename DerivedX>
void check_kkt_dims(const ProblemInstance<Scalar>& inst, const Eigen::MatrixBase<DerivedZ>& z,
                    const Eigen::MatrixBase<DerivedX>& x, const Convexification<Scalar>& conv) {
  require_dims(z.size() == inst.n_z(), "z length");
  require_dims(x.size() == inst.n_h, "x length");
  if (conv.enabled) require_dims(conv.y_lin.size() == inst.n_y, "convexification y_lin");
}

/// Gradient of the (possibly convexified) objective at y.
template <typename Scalar, typename DerivedY, typename DerivedX>
Vector<Scalar> model_grad(const ProblemInstance<Scalar>& inst, const Eigen::MatrixBase<DerivedY>& y,
                          const Eigen::MatrixBase<DerivedX>& x,
                          const Convexification<Scalar>& conv) {
  if (!conv.enabled) return objective_grad(inst, y, x);
  return objective_grad(inst, conv.y_lin, x) + Scalar(2) * conv.rho * (y - conv.y_lin);
}

template <typename Scalar, typename DerivedY, typename DerivedX>
Matrix<Scalar> model_hess(const ProblemInstance<Scalar>& inst, const Eigen::MatrixBase<DerivedY>& y,
                          const Eigen::MatrixBase<DerivedX>& x,
                          const Convexification<Scalar>& conv) {
  if (!conv.enabled) return objective_hess(inst, y, x);
  return Matrix<Scalar>::Identity(inst.n_y, inst.n_y) * (Scalar(2) * conv.rho);
}

}  // namespace detail

/// Raw residual vector [grad L; A y - x; phi(lambda_i, (G y - h)_i)].
template <typename Scalar, typename DerivedZ, typename DerivedX>
Vector<Scalar> kkt_residual_vector(const ProblemInstance<Scalar>& inst,
                                   const Eigen::MatrixBase<DerivedZ>& z,
                                   const Eigen::MatrixBase<DerivedX>& x,
                                   const Convexification<Scalar>& conv = {},
                                   Scalar eps = Scalar(kDefaultFbEps)) {
  detail::check_kkt_dims(inst, z, x, conv);
  const Index ny = inst.n_y, nh = inst.n_h, ng = inst.n_g;
  const auto y = z.segment(0, ny);
  const auto nu = z.segment(ny, nh);
  const auto lam = z.segment(ny + nh, ng);

  Vector<Scalar> f(inst.n_z());
  f.segment(0, ny) = detail::model_grad(inst, y, x, conv);
  if (nh > 0) f.segment(0, ny).noalias() += inst.a_mat.transpose() * nu;
  if (ng > 0) f.segment(0, ny).noalias() += inst.g_mat.transpose() * lam;
  if (nh > 0) f.segment(ny, nh) = inst.a_mat * y - x;
  if (ng > 0) {
    const Vector<Scalar> gval = inst.g_mat * y - inst.h_vec;
    for (Index i = 0; i < ng; ++i) f[ny + nh + i] = fb(lam[i], gval[i], eps);
  }
  return f;
}

template <typename Scalar, typename DerivedZ, typename DerivedX>
KktResidual<Scalar> kkt_residual(const ProblemInstance<Scalar>& inst,
                                 const Eigen::MatrixBase<DerivedZ>& z,
                                 const Eigen::MatrixBase<DerivedX>& x,
                                 const Convexification<Scalar>& conv = {},
                                 Scalar eps = Scalar(kDefaultFbEps)) {
  return KktResidual<Scalar>(kkt_residual_vector(inst, z, x, conv, eps));
}

template <typename Scalar, typename DerivedX>
KktResidual<Scalar> kkt_residual(const ProblemInstance<Scalar>& inst, const PrimalDual<Scalar>& z,
                                 const Eigen::MatrixBase<DerivedX>& x,
                                 const Convexification<Scalar>& conv = {},
                                 Scalar eps = Scalar(kDefaultFbEps)) {
  return kkt_residual(inst, z.stacked(), x, conv, eps);
}

/**
 * Dense Jacobian dF/dz with block structure
 *
 *   [ H      A^T  G^T ]
 *   [ A      0    0   ]
 *   [ Dg G   0    Dl  ]
 *
 * H is the objective Hessian, or 2 rho I when convexified (y_lin is treated
 * as a constant).
 */
template <typename Scalar, typename DerivedZ, typename DerivedX>
Matrix<Scalar> kkt_jacobian(const ProblemInstance<Scalar>& inst,
                            const Eigen::MatrixBase<DerivedZ>& z,
                            const Eigen::MatrixBase<DerivedX>& x,
                            const Convexification<Scalar>& conv = {},
                            Scalar eps = Scalar(kDefaultFbEps)) {
  detail::check_kkt_dims(inst, z, x, conv);
  const Index ny = inst.n_y, nh = inst.n_h, ng = inst.n_g;
  const auto y = z.segment(0, ny);
  const auto lam = z.segment(ny + nh, ng);

  Matrix<Scalar> jac = Matrix<Scalar>::Zero(inst.n_z(), inst.n_z());
  jac.block(0, 0, ny, ny) = detail::model_hess(inst, y, x, conv);
  if (nh > 0) {
    jac.block(0, ny, ny, nh) = inst.a_mat.transpose();
    jac.block(ny, 0, nh, ny) = inst.a_mat;
  }
  if (ng > 0) {
    jac.block(0, ny + nh, ny, ng) = inst.g_mat.transpose();
    const Vector<Scalar> gval = inst.g_mat * y - inst.h_vec;
    for (Index i = 0; i < ng; ++i) {
      const auto d = fb_partials(lam[i], gval[i], eps);
      jac.block(ny + nh + i, 0, 1, ny) = d.d_g * inst.g_mat.row(i);
      jac(ny + nh + i, ny + nh + i) = d.d_lambda;
    }
  }
  return jac;
}

template <typename Scalar, typename DerivedX>
Matrix<Scalar> kkt_jacobian(const ProblemInstance<Scalar>& inst, const PrimalDual<Scalar>& z,
                            const Eigen::MatrixBase<DerivedX>& x,
                            const Convexification<Scalar>& conv = {},
                            Scalar eps = Scalar(kDefaultFbEps)) {
  return kkt_jacobian(inst, z.stacked(), x, conv, eps);
}

/// Residual together with J^T F, the gradient of T, without forming J.
template <typename Scalar>
struct ResidualWithGradient {
  KktResidual<Scalar> residual;
  Vector<Scalar> grad_t;  // J^T F
};

template <typename Scalar, typename DerivedZ, typename DerivedX>
ResidualWithGradient<Scalar> kkt_residual_and_grad_t(const ProblemInstance<Scalar>& inst,
                                                     const Eigen::MatrixBase<DerivedZ>& z,
                                                     const Eigen::MatrixBase<DerivedX>& x,
                                                     const Convexification<Scalar>& conv = {},
                                                     Scalar eps = Scalar(kDefaultFbEps)) {
  detail::check_kkt_dims(inst, z, x, conv);
  const Index ny = inst.n_y, nh = inst.n_h, ng = inst.n_g;
  const auto y = z.segment(0, ny);
  const auto nu = z.segment(ny, nh);
  const auto lam = z.segment(ny + nh, ng);

  Vector<Scalar> f(inst.n_z());
  f.segment(0, ny) = detail::model_grad(inst, y, x, conv);
  if (nh > 0) f.segment(0, ny).noalias() += inst.a_mat.transpose() * nu;
  if (ng > 0) f.segment(0, ny).noalias() += inst.g_mat.transpose() * lam;
  if (nh > 0) f.segment(ny, nh) = inst.a_mat * y - x;

  Vector<Scalar> weighted_fb(ng);  // Dg * F_fb
  Vector<Scalar> grad(inst.n_z());
  if (ng > 0) {
    const Vector<Scalar> gval = inst.g_mat * y - inst.h_vec;
    for (Index i = 0; i < ng; ++i) {
      const Scalar r = std::hypot(lam[i], gval[i], eps);
      const Scalar phi = lam[i] - gval[i] - r;
      f[ny + nh + i] = phi;
      if (r == Scalar(0)) throw SingularPoint("FB derivative at lambda = g = eps = 0");
      weighted_fb[i] = (Scalar(-1) - gval[i] / r) * phi;
      grad[ny + nh + i] = (Scalar(1) - lam[i] / r) * phi;
    }
  }
  const auto f_stat = f.segment(0, ny);
  grad.segment(0, ny) = detail::model_hess(inst, y, x, conv) * f_stat;
  if (nh > 0) grad.segment(0, ny).noalias() += inst.a_mat.transpose() * f.segment(ny, nh);
  if (ng > 0) grad.segment(0, ny).noalias() += inst.g_mat.transpose() * weighted_fb;
  if (nh > 0) grad.segment(ny, nh) = inst.a_mat * f_stat;
  if (ng > 0) grad.segment(ny + nh, ng) += inst.g_mat * f_stat;
  return {KktResidual<Scalar>(std::move(f)), std::move(grad)};
}

template <typename Scalar>
Scalar metric_t(const KktResidual<Scalar>& f) {
  return Scalar(0.5) * f.f_vec.squaredNorm();
}

}  // namespace lisco
