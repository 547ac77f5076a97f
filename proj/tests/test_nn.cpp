#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace lisco;
using lisco::test::flatten;
using lisco::test::rel_err;
using lisco::test::unflatten;

TEST(MlpInit, FullScaleParameterCounts) {
  EXPECT_EQ(mlp_parameter_count(50, 2048, 200), 514248);
  EXPECT_EQ(mlp_parameter_count(251, 2048, 200), 925896);
  auto p = mlp_init<double>(50, 2048, 200, 0.01, 1);
  EXPECT_EQ(p.parameter_count(), 514248);
  auto q = mlp_init<double>(251, 2048, 200, 0.01, 1);
  EXPECT_EQ(q.parameter_count(), 925896);
}

TEST(MlpInit, DeterministicBoundedZeroBias) {
  auto a = mlp_init<double>(7, 9, 3, 0.01, 5);
  auto b = mlp_init<double>(7, 9, 3, 0.01, 5);
  EXPECT_EQ(a.w1, b.w1);
  EXPECT_EQ(a.w2, b.w2);
  EXPECT_NE(a.w1, mlp_init<double>(7, 9, 3, 0.01, 6).w1);
  EXPECT_LE(a.w1.cwiseAbs().maxCoeff(), std::sqrt(1.0 / 7));
  EXPECT_LE(a.w2.cwiseAbs().maxCoeff(), std::sqrt(1.0 / 9));
  EXPECT_EQ(a.b1, Vector<double>::Zero(9));
  EXPECT_EQ(a.b2, Vector<double>::Zero(3));
  EXPECT_THROW(mlp_init<double>(0, 9, 3), ValidationError);
}

TEST(MlpForward, ZeroWeightsGiveBias) {
  auto p = mlp_init<double>(4, 6, 2, 0.01, 1);
  p.w1.setZero();
  p.w2.setZero();
  p.b2 << 1.5, -2;
  Rng rng(1);
  Matrix<double> u(3, 4);
  for (Index r = 0; r < 3; ++r) u.row(r) = test::normal_vector(4, rng).transpose();
  auto out = mlp_forward(p, u);
  for (Index r = 0; r < 3; ++r) EXPECT_EQ(out.output.row(r), p.b2.transpose());
}

TEST(MlpForward, LeakyActivation) {
  MlpParams<double> p;
  p.w1 = Matrix<double>::Identity(1, 1);
  p.b1 = Vector<double>::Zero(1);
  p.w2 = Matrix<double>::Identity(1, 1);
  p.b2 = Vector<double>::Zero(1);
  p.leak = 0.01;
  Matrix<double> u(2, 1);
  u << -1, 2;
  auto out = mlp_forward(p, u);
  EXPECT_DOUBLE_EQ(out.output(0, 0), -0.01);
  EXPECT_DOUBLE_EQ(out.output(1, 0), 2.0);
}

TEST(MlpForward, LinearInOutputLayer) {
  auto p = mlp_init<double>(5, 8, 3, 0.01, 2);
  p.b2.setConstant(0.3);
  Rng rng(2);
  Matrix<double> u(4, 5);
  for (Index r = 0; r < 4; ++r) u.row(r) = test::normal_vector(5, rng).transpose();
  auto q = p;
  q.w2 *= 2;
  q.b2 *= 2;
  EXPECT_LE(rel_err(mlp_forward(q, u).output, Matrix<double>(2 * mlp_forward(p, u).output)), 1e-15);
}

TEST(MlpForward, BatchMatchesSingleAndRejectsBadInput) {
  auto p = mlp_init<double>(5, 8, 3, 0.01, 2);
  Rng rng(2);
  Matrix<double> u(4, 5);
  for (Index r = 0; r < 4; ++r) u.row(r) = test::normal_vector(5, rng).transpose();
  auto out = mlp_forward(p, u);
  for (Index r = 0; r < 4; ++r)
    EXPECT_LE(rel_err(Vector<double>(out.output.row(r).transpose()),
                      mlp_apply(p, Vector<double>(u.row(r).transpose()))),
              1e-14);
  EXPECT_THROW(mlp_forward(p, Matrix<double>::Zero(2, 4)), DimensionMismatch);
  u(1, 1) = std::nan("");
  EXPECT_THROW(mlp_forward(p, u), NumericalError);
}

TEST(MlpBackward, ZeroUpstreamAndBiasIdentity) {
  auto p = mlp_init<double>(3, 5, 2, 0.01, 3);
  Rng rng(3);
  Matrix<double> u(4, 3);
  for (Index r = 0; r < 4; ++r) u.row(r) = test::normal_vector(3, rng).transpose();
  auto out = mlp_forward(p, u);
  auto g0 = mlp_backward(p, out.cache, Matrix<double>::Zero(4, 2));
  EXPECT_EQ(flatten(g0), Vector<double>::Zero(p.parameter_count()));
  Matrix<double> d(4, 2);
  for (Index r = 0; r < 4; ++r) d.row(r) = test::normal_vector(2, rng).transpose();
  auto g = mlp_backward(p, out.cache, d);
  EXPECT_LE(rel_err(g.b2, Vector<double>(d.colwise().sum().transpose())), 1e-15);
  EXPECT_THROW(mlp_backward(p, out.cache, Matrix<double>::Zero(3, 2)), DimensionMismatch);
}

TEST(MlpBackward, MatchesFiniteDifferencesOnRandomNetworks) {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(derive_seed(17, std::uint64_t(trial)));
    const Index in = 2 + trial % 4, hidden = 3 + trial % 5, out = 1 + trial % 3;
    auto p = mlp_init<double>(in, hidden, out, 0.01, std::uint64_t(trial));
    p.b1 = test::normal_vector(hidden, rng, 0.3);
    p.b2 = test::normal_vector(out, rng, 0.3);
    Matrix<double> u(3, in), w(3, out);
    for (Index r = 0; r < 3; ++r) {
      u.row(r) = test::normal_vector(in, rng).transpose();
      w.row(r) = test::normal_vector(out, rng).transpose();
    }
    // Scalar probe L = sum(w .* output).
    auto loss = [&](const Vector<double>& theta) {
      return (mlp_forward(unflatten(p, theta), u).output.array() * w.array()).sum();
    };
    auto fwd = mlp_forward(p, u);
    const Vector<double> analytic = flatten(mlp_backward(p, fwd.cache, w));
    const Vector<double> numeric = test::fd_gradient(loss, flatten(p), 1e-6);
    EXPECT_LE(rel_err(analytic, numeric), 1e-6) << "trial " << trial;
  }
}

TEST(AdamW, FirstStepHandValue) {
  MlpParams<double> p;
  p.w1 = Matrix<double>::Ones(1, 1);
  p.b1 = Vector<double>::Zero(1);
  p.w2 = Matrix<double>::Zero(1, 1);
  p.b2 = Vector<double>::Zero(1);
  auto s = AdamWState<double>::for_params(p, 1e-3, 1e-3);
  auto g = MlpGradients<double>::zeros_like(p);
  g.w1(0, 0) = 1;
  adamw_step(s, p, g);
  // Decay lr * wd * theta = 1e-6; Adam term lr * m_hat / (sqrt(v_hat) + eps) with m_hat = v_hat = 1.
  EXPECT_NEAR(p.w1(0, 0), 1.0 - 1e-3 * 1e-3 * 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)), 1e-12);
  EXPECT_NEAR(p.w1(0, 0), 0.998999, 1e-7);
  EXPECT_EQ(s.step_count, 1);
}

TEST(AdamW, ZeroGradientNoDecayIsIdentity) {
  auto p = mlp_init<double>(3, 4, 2, 0.01, 1);
  const auto before = p;
  auto s = AdamWState<double>::for_params(p, 1e-3, 0.0);
  adamw_step(s, p, MlpGradients<double>::zeros_like(p));
  EXPECT_EQ(p.w1, before.w1);
  EXPECT_EQ(p.w2, before.w2);
}

TEST(AdamW, MatchesScalarOracleOverFiveSteps) {
  for (double wd : {0.0, 1e-3, 0.1}) {
    MlpParams<double> p;
    p.w1 = Matrix<double>::Constant(1, 1, 0.7);
    p.b1 = Vector<double>::Zero(1);
    p.w2 = Matrix<double>::Zero(1, 1);
    p.b2 = Vector<double>::Zero(1);
    auto s = AdamWState<double>::for_params(p, 1e-2, wd);
    test::ScalarAdamW oracle{1e-2, 0.9, 0.999, 1e-8, wd};
    double theta = 0.7;
    const double grads[] = {0.3, -1.2, 0.05, 2.0, -0.4};
    for (double gv : grads) {
      auto g = MlpGradients<double>::zeros_like(p);
      g.w1(0, 0) = gv;
      adamw_step(s, p, g);
      theta = oracle.step(theta, gv);
      EXPECT_NEAR(p.w1(0, 0), theta, 1e-12);
    }
  }
}

TEST(AdamW, ZeroBetasGiveSignScaledDescent) {
  MlpParams<double> p;
  p.w1 = Matrix<double>::Constant(1, 1, 2.0);
  p.b1 = Vector<double>::Zero(1);
  p.w2 = Matrix<double>::Zero(1, 1);
  p.b2 = Vector<double>::Zero(1);
  auto s = AdamWState<double>::for_params(p, 0.1, 0.0);
  s.beta1 = 0;
  s.beta2 = 0;
  double theta = 2.0;
  for (double gv : {3.0, -0.5, 1e-3}) {
    auto g = MlpGradients<double>::zeros_like(p);
    g.w1(0, 0) = gv;
    adamw_step(s, p, g);
    theta -= 0.1 * gv / (std::abs(gv) + 1e-8);
    EXPECT_NEAR(p.w1(0, 0), theta, 1e-14);
  }
}

TEST(AdamW, NonFiniteGradientRejectedWithoutUpdate) {
  auto p = mlp_init<double>(2, 3, 1, 0.01, 1);
  const auto before = p;
  auto s = AdamWState<double>::for_params(p, 1e-3, 1e-3);
  auto g = MlpGradients<double>::zeros_like(p);
  g.b1[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adamw_step(s, p, g), NumericalError);
  EXPECT_EQ(p.w1, before.w1);
  EXPECT_EQ(s.step_count, 0);
}

TEST(Plateau, ReducesAfterPatienceNonImprovingEpochs) {
  PlateauScheduler s;
  double lr = 1e-3;
  auto d = plateau_step(s, 1.0, lr);  // sets best
  EXPECT_FALSE(d.reduced);
  for (int e = 0; e < 999; ++e) {
    d = plateau_step(s, 1.0, lr);
    ASSERT_FALSE(d.reduced) << e;
  }
  d = plateau_step(s, 1.0, lr);
  EXPECT_TRUE(d.reduced);
  EXPECT_NEAR(d.lr, 1e-4, 1e-18);
  EXPECT_EQ(s.cooldown_remaining, 100);
}

TEST(Plateau, ImprovingLossNeverReduces) {
  PlateauScheduler s;
  double lr = 1e-3, loss = 1.0;
  for (int e = 0; e < 5000; ++e) {
    loss *= 0.999;
    auto d = plateau_step(s, loss, lr);
    ASSERT_FALSE(d.reduced);
    ASSERT_FALSE(d.stop);
    lr = d.lr;
  }
  EXPECT_EQ(lr, 1e-3);
}

TEST(Plateau, CooldownDelaysNextReduction) {
  PlateauScheduler s;
  s.patience = 5;
  s.cooldown = 3;
  double lr = 1.0;
  std::vector<int> at;
  for (int e = 0; e < 40; ++e) {
    auto d = plateau_step(s, 1.0, lr);
    lr = d.lr;
    if (d.reduced) at.push_back(e);
  }
  ASSERT_GE(at.size(), 2u);
  // First reduction after 1 + 5 epochs; afterwards cooldown (3) + patience (5).
  EXPECT_EQ(at[0], 5);
  EXPECT_EQ(at[1] - at[0], 8);
}

TEST(Plateau, StopsAtMinimumLearningRate) {
  PlateauScheduler s;
  s.patience = 3;
  s.cooldown = 0;
  double lr = 1e-3;
  bool stopped = false;
  for (int e = 0; e < 200 && !stopped; ++e) {
    auto d = plateau_step(s, 1.0, lr);
    EXPECT_GE(d.lr, s.min_lr);
    lr = d.lr;
    stopped = d.stop;
  }
  EXPECT_TRUE(stopped);
  EXPECT_NEAR(lr, 1e-8, 1e-20);
}

TEST(Plateau, InvalidFactorRejected) {
  PlateauScheduler s;
  s.factor = 1.0;
  EXPECT_THROW(plateau_step(s, 1.0, 1e-3), ValidationError);
}

TEST(Weights, RoundTripPreservesOutputs) {
  auto p = mlp_init<double>(6, 10, 4, 0.01, 9);
  p.role = NetworkRole::Solver;
  Rng rng(9);
  p.b1 = test::normal_vector(10, rng);
  const auto path = (test::scratch_dir("weights") / "w.json").string();
  save_weights(p, path, {{"instance_seed", 3}});
  auto q = load_weights<double>(path, NetworkRole::Solver);
  const Vector<double> probe = test::normal_vector(6, rng);
  EXPECT_EQ(mlp_apply(p, probe), mlp_apply(q, probe));
  EXPECT_EQ(q.role, NetworkRole::Solver);
  const auto meta = load_weight_metadata(path);
  EXPECT_EQ(meta.at("role"), "solver");
  EXPECT_EQ(meta.at("instance_seed"), 3);
  EXPECT_EQ(meta.at("residual_row_order_version"), 1);
  EXPECT_EQ(meta.at("leak"), 0.01);
}

TEST(Weights, RoleMismatchAndCorruption) {
  auto p = mlp_init<double>(3, 4, 2, 0.01, 1);
  p.role = NetworkRole::Predictor;
  const auto dir = test::scratch_dir("weights_bad");
  const auto path = (dir / "pred.json").string();
  save_weights(p, path);
  EXPECT_THROW(load_weights<double>(path, NetworkRole::Solver), RoleMismatch);
  EXPECT_NO_THROW(load_weights<double>(path, NetworkRole::Predictor));

  const auto corrupt = (dir / "corrupt.json").string();
  std::ofstream(corrupt) << "{\"format_version\": 1, \"role\": \"pre";
  EXPECT_THROW(load_weights<double>(corrupt), ValidationError);

  auto j = weights_to_json(p);
  j["b1"].erase(0);
  EXPECT_THROW(weights_from_json<double>(j), DimensionMismatch);
  j = weights_to_json(p);
  j["format_version"] = 7;
  EXPECT_THROW(weights_from_json<double>(j), ValidationError);
}
