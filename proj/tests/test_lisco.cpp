#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace lisco;
using lisco::test::rel_err;

namespace {

struct Fixture {
  ProblemInstance<double> inst;
  Vector<double> x;
  Vector<double> z_star;
};

Fixture solved_qp(std::uint64_t seed = 3) {
  Fixture f{gen_instance<double>(ProblemKind::ConvexQp, 5, 2, 3, seed), {}, {}};
  f.x = sample_params(f.inst, 1, seed).x.row(0).transpose();
  auto sol = oracle_solve(f.inst, f.x);
  EXPECT_EQ(sol.status, OracleStatus::Converged);
  f.z_star = sol.z_star;
  return f;
}

MlpParams<double> random_solver(const ProblemInstance<double>& inst, std::uint64_t seed,
                                double scale = 1.0) {
  auto net = mlp_init<double>(solver_in_dim(inst.n_z(), inst.n_h), 12, inst.n_z(), 0.01, seed);
  net.w2 *= scale;
  net.role = NetworkRole::Solver;
  return net;
}

}  // namespace

TEST(LiscoIterate, PreConvergedStartTakesNoSteps) {
  auto fx = solved_qp();
  long calls = 0;
  SolveOptions opts;
  opts.record_trace = true;
  auto rep = lisco_iterate(fx.inst, fx.x, fx.z_star,
                           [&](const KktResidual<double>&, const Vector<double>&) {
                             ++calls;
                             return Vector<double>::Zero(fx.inst.n_z()).eval();
                           },
                           opts);
  EXPECT_TRUE(rep.converged);
  EXPECT_EQ(rep.status, SolveStatus::Converged);
  EXPECT_EQ(rep.iterations, 0);
  EXPECT_EQ(calls, 0);
  EXPECT_EQ(rep.z_final, fx.z_star);
  EXPECT_EQ(rep.trace.size(), 1u);
}

TEST(LiscoIterate, DivergingStepTriggersOneResetThenConverges) {
  auto fx = solved_qp(4);
  Rng rng(1);
  const Vector<double> z0 = fx.z_star + test::normal_vector(fx.inst.n_z(), rng, 0.1);
  long calls = 0;
  SolveOptions opts;
  opts.record_trace = true;
  auto step = [&](const KktResidual<double>&, const Vector<double>&) -> Vector<double> {
    ++calls;
    if (calls == 1) return Vector<double>::Constant(fx.inst.n_z(), 1e3);
    // After the reset the iterate is z0 again and alpha is 0.95.
    return (fx.z_star - z0) / 0.95;
  };
  auto rep = lisco_iterate(fx.inst, fx.x, z0, step, opts);
  EXPECT_EQ(rep.resets, 1);
  EXPECT_DOUBLE_EQ(rep.alpha_final, 0.95);
  EXPECT_TRUE(rep.converged);
  EXPECT_EQ(rep.iterations, 2);
  ASSERT_EQ(rep.trace.size(), 3u);
  EXPECT_FALSE(rep.trace[0].reset);
  EXPECT_TRUE(rep.trace[1].reset);
  EXPECT_DOUBLE_EQ(rep.trace[1].alpha, 0.95);
  EXPECT_GT(rep.trace[1].t, opts.omega * opts.omega * rep.trace[0].t);
  EXPECT_EQ(rep.trace[1].t_best, rep.trace[0].t);
}

TEST(LiscoIterate, DivergingThenIdleKeepsBestIterate) {
  auto fx = solved_qp(5);
  Rng rng(2);
  const Vector<double> z0 = fx.z_star + test::normal_vector(fx.inst.n_z(), rng, 0.1);
  long calls = 0;
  SolveOptions opts;
  opts.n_max = 6;
  auto rep = lisco_iterate(
      fx.inst, fx.x, z0,
      [&](const KktResidual<double>&, const Vector<double>&) -> Vector<double> {
        return ++calls == 1 ? Vector<double>::Constant(fx.inst.n_z(), -500.0)
                            : Vector<double>::Zero(fx.inst.n_z());
      },
      opts);
  EXPECT_EQ(rep.resets, 1);
  EXPECT_DOUBLE_EQ(rep.alpha_final, 0.95);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.status, SolveStatus::MaxIterations);
  EXPECT_EQ(rep.iterations, 6);
  EXPECT_EQ(rep.z_final, z0);
}

TEST(LiscoIterate, NonFiniteStepCountsAsReset) {
  auto fx = solved_qp(6);
  Rng rng(3);
  const Vector<double> z0 = fx.z_star + test::normal_vector(fx.inst.n_z(), rng, 0.1);
  SolveOptions opts;
  opts.n_max = 3;
  auto rep = lisco_iterate(fx.inst, fx.x, z0,
                           [&](const KktResidual<double>&, const Vector<double>&) {
                             return Vector<double>::Constant(
                                        fx.inst.n_z(), std::numeric_limits<double>::quiet_NaN())
                                 .eval();
                           },
                           opts);
  EXPECT_EQ(rep.resets, 3);
  EXPECT_NEAR(rep.alpha_final, std::pow(0.95, 3), 1e-15);
  EXPECT_EQ(rep.z_final, z0);
}

TEST(LiscoSolve, ZeroNetworkReturnsStartUnconverged) {
  auto fx = solved_qp(7);
  auto net = random_solver(fx.inst, 1);
  net.w1.setZero();
  net.w2.setZero();
  Rng rng(4);
  const Vector<double> z0 = test::normal_vector(fx.inst.n_z(), rng);
  SolveOptions opts;
  opts.n_max = 25;
  auto rep = lisco_solve(fx.inst, fx.x, nullptr, net, opts, z0);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.iterations, 25);
  EXPECT_EQ(rep.resets, 0);
  EXPECT_EQ(rep.z_final, z0);
  EXPECT_DOUBLE_EQ(rep.t_final, kkt_residual(fx.inst, z0, fx.x).t_metric);
}

TEST(LiscoSolve, BatchMatchesPointwise) {
  auto inst = gen_instance<double>(ProblemKind::NonconvexQp, 5, 2, 3, 8);
  auto net = random_solver(inst, 2, 0.05);
  auto pred = mlp_init<double>(2, 10, inst.n_z(), 0.01, 3);
  pred.role = NetworkRole::Predictor;
  const auto xs = sample_params(inst, 6, 1).x;
  for (bool use_pred : {false, true}) {
    SolveOptions opts;
    opts.n_max = 30;
    opts.record_trace = true;
    opts.use_predictor = use_pred;
    opts.seed = 77;
    const auto batch = lisco_solve_batch(inst, xs, use_pred ? &pred : nullptr, net, opts);
    ASSERT_EQ(batch.size(), 6u);
    for (Index i = 0; i < xs.rows(); ++i) {
      SolveOptions o = opts;
      o.seed = derive_seed(opts.seed, std::uint64_t(i));
      const auto one = lisco_solve(inst, Vector<double>(xs.row(i).transpose()),
                                   use_pred ? &pred : nullptr, net, o);
      const auto& b = batch[size_t(i)];
      EXPECT_EQ(report_to_json(b, false), report_to_json(one, false)) << "point " << i;
    }
  }
}

TEST(LiscoSolve, TraceTracksBestAndAlphaIsMonotone) {
  auto inst = gen_instance<double>(ProblemKind::ConvexQp, 5, 2, 3, 9);
  auto net = random_solver(inst, 4, 0.5);
  SolveOptions opts;
  opts.n_max = 60;
  opts.record_trace = true;
  opts.use_predictor = false;
  const auto xs = sample_params(inst, 5, 3).x;
  const auto reps = lisco_solve_batch(inst, xs, nullptr, net, opts);
  for (const auto& r : reps) {
    ASSERT_EQ(r.trace.size(), size_t(r.iterations) + 1);
    double best = r.trace[0].t;
    for (size_t k = 1; k < r.trace.size(); ++k) {
      if (std::isfinite(r.trace[k].t)) best = std::min(best, r.trace[k].t);
      EXPECT_EQ(r.trace[k].t_best, best);
      EXPECT_LE(r.trace[k].alpha, r.trace[k - 1].alpha);
      EXPECT_EQ(r.trace[k].alpha < r.trace[k - 1].alpha, r.trace[k].reset);
    }
    if (!r.converged) EXPECT_EQ(r.t_final, r.trace.back().t_best);
    EXPECT_LE(r.t_final, r.trace[0].t);
  }
}

TEST(LiscoSolve, NonFiniteStartIsReported) {
  auto fx = solved_qp(10);
  auto net = random_solver(fx.inst, 1);
  Vector<double> z0 = Vector<double>::Zero(fx.inst.n_z());
  z0[0] = std::numeric_limits<double>::infinity();
  auto rep = lisco_solve(fx.inst, fx.x, nullptr, net, SolveOptions{}, z0);
  EXPECT_EQ(rep.status, SolveStatus::NonFiniteStart);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.iterations, 0);
}

TEST(LiscoSolve, RoleAndShapeChecks) {
  auto fx = solved_qp(11);
  auto net = random_solver(fx.inst, 1);
  auto pred = mlp_init<double>(2, 10, fx.inst.n_z(), 0.01, 3);
  pred.role = NetworkRole::Predictor;
  EXPECT_THROW(lisco_solve(fx.inst, fx.x, &pred, pred, SolveOptions{}), RoleMismatch);
  EXPECT_THROW(lisco_solve(fx.inst, fx.x, &net, net, SolveOptions{}), RoleMismatch);
  EXPECT_THROW(lisco_solve(fx.inst, Vector<double>(Vector<double>::Zero(3)), &pred, net,
                           SolveOptions{}),
               DimensionMismatch);
}

TEST(SolveOptions, Validation) {
  auto fx = solved_qp(12);
  auto net = random_solver(fx.inst, 1);
  SolveOptions o;
  o.beta = 1.0;
  EXPECT_THROW(lisco_solve(fx.inst, fx.x, nullptr, net, o), ValidationError);
  o = {};
  o.omega = 1.0;
  EXPECT_THROW(lisco_solve(fx.inst, fx.x, nullptr, net, o), ValidationError);
  o = {};
  o.tau = 0;
  EXPECT_THROW(lisco_solve(fx.inst, fx.x, nullptr, net, o), ValidationError);
}

TEST(SolveOptions, TerminationMetricSwitch) {
  Vector<double> f(2);
  f << 3e-5, 4e-5;
  const KktResidual<double> r(f);
  EXPECT_NEAR(detail::termination_value(r, TerminationMetric::Norm), 5e-5, 1e-20);
  EXPECT_NEAR(detail::termination_value(r, TerminationMetric::SquaredNorm), 2.5e-9, 1e-24);

  // ||F||^2 = 2.5e-9 < 1e-8 terminates; ||F|| = 5e-5 does not.
  auto fx = solved_qp(13);
  SolveOptions opts;
  opts.n_max = 1;
  auto zero = [&](const KktResidual<double>&, const Vector<double>&) {
    return Vector<double>::Zero(fx.inst.n_z()).eval();
  };
  Vector<double> z = fx.z_star;
  z[0] += 3e-5;  // stationarity row 0 grows by q_00 * 3e-5
  const double norm = kkt_residual(fx.inst, z, fx.x).norm2;
  ASSERT_GT(norm * norm, 1e-13);
  ASSERT_LT(norm * norm, 1e-8);
  EXPECT_TRUE(lisco_iterate(fx.inst, fx.x, z, zero, opts).converged);
  opts.metric = TerminationMetric::Norm;
  EXPECT_FALSE(lisco_iterate(fx.inst, fx.x, z, zero, opts).converged);
}

TEST(ReportJson, FieldsAndOptionalWallTime) {
  auto fx = solved_qp(14);
  auto net = random_solver(fx.inst, 1);
  SolveOptions opts;
  opts.n_max = 3;
  auto rep = lisco_solve(fx.inst, fx.x, nullptr, net, opts);
  auto j = report_to_json(rep, false);
  EXPECT_FALSE(j.contains("wall_time"));
  EXPECT_FALSE(j.contains("trace"));
  EXPECT_EQ(j["iterations"].get<long>(), rep.iterations);
  EXPECT_EQ(j["z_final"].size(), size_t(fx.inst.n_z()));
  EXPECT_TRUE(report_to_json(rep).contains("wall_time"));
}
