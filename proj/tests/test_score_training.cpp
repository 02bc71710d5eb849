#include <gtest/gtest.h>

#include <cmath>

#include "msbtm/analytic_oracle.hpp"
#include "msbtm/denoising.hpp"
#include "msbtm/problems.hpp"
#include "msbtm/score_training.hpp"

using namespace msbtm;

namespace {

ScoreNet linear_net(const Mat& w, const Vec& b) {
  ScoreNet net({static_cast<int>(w.cols()), static_cast<int>(w.rows())});
  net.weight(0) = w;
  net.bias(0) = b;
  return net;
}

GaussianState harmonic_start() { return harmonic_initial_state(HarmonicParams{}); }

Mat harmonic_samples(int n, std::uint64_t seed) {
  const GaussianState g = harmonic_start();
  return gaussian_samples(g.mean, g.cov, n, seed);
}

}  // namespace

// ---------------------------------------------------------------------------
// Denoising divergence

TEST(DenoisingDivergence, ConstantFieldIsExactlyZero) {
  auto field = [](const Vec&) {
    Vec c(2);
    c << 3.5, -1.25;
    return c;
  };
  RngStream rng(1, 1);
  for (double kappa : {1e-4, 0.1, 2.0}) {
    EXPECT_EQ(denoising_divergence(field, Vec::Ones(2), kappa, 7, rng), 0.0);
  }
}

TEST(DenoisingDivergence, IdentityField) {
  auto field = [](const Vec& x) { return x; };
  RngStream rng(2, 2);
  const int m = 10000;
  // Per-probe value is |ξ|² with mean 2 and variance 4.
  const double tol = 4.0 * std::sqrt(4.0 / m);
  for (double kappa : {1e-4, 1.0}) {
    Vec x(2);
    x << 0.3, -0.8;
    EXPECT_NEAR(denoising_divergence(field, x, kappa, m, rng), 2.0, tol);
  }
}

TEST(DenoisingDivergence, LinearFieldConvergesToTrace) {
  Mat a(2, 2);
  a << 1, 3, 0, 2;
  auto field = [&](const Vec& x) { return Vec(a * x); };
  RngStream rng(3, 3);
  // ξᵀAξ = ξ₀² + 3ξ₀ξ₁ + 2ξ₁²: variance 2 + 9 + 8.
  const int m = 100000;
  EXPECT_NEAR(denoising_divergence(field, Vec::Zero(2), 1e-3, m, rng), a.trace(),
              4.0 * std::sqrt(19.0 / m));
}

TEST(DenoisingDivergence, CubicBiasShrinksQuadratically) {
  // s(x) = x∘x∘x: exact divergence 3|x|², estimator bias κ² E|ξ|⁴_4 = 3 d κ².
  auto field = [](const Vec& x) { return Vec(x.array().cube()); };
  Vec x(2);
  x << 0.5, -0.3;
  const double exact = 3.0 * x.squaredNorm();
  const int m = 1000000;
  RngStream r1(4, 4), r2(4, 4);
  const double b1 = denoising_divergence(field, x, 0.2, m, r1) - exact;
  const double b2 = denoising_divergence(field, x, 0.1, m, r2) - exact;
  EXPECT_NEAR(b1, 3.0 * 2 * 0.04, 0.01);
  EXPECT_NEAR(b1 / b2, 4.0, 0.5);
}

TEST(DenoisingDivergence, NoisyCoordinatesAndWeight) {
  // s over coordinate 1 of a 2-D state: s(x, v) = x v + 2 v², ∂_v s = x + 4v.
  auto field = [](const Vec& z) { return Vec::Constant(1, z(0) * z(1) + 2.0 * z(1) * z(1)); };
  Vec z(2);
  z << 1.5, -0.25;
  const std::vector<int> noisy{1};
  const Mat w = Mat::Constant(1, 1, 0.1);
  RngStream rng(5, 5);
  const double est = denoising_divergence(field, z, 1e-4, 20000, rng, noisy, &w);
  EXPECT_NEAR(est, 0.1 * (z(0) + 4.0 * z(1)), 4.0 * 0.1 * 0.5 * std::sqrt(2.0 / 20000));
}

TEST(DenoisingDivergence, RejectsBadArguments) {
  auto field = [](const Vec& x) { return x; };
  RngStream rng(1, 1);
  EXPECT_THROW(denoising_divergence(field, Vec::Zero(2), 0.0, 1, rng), Error);
  EXPECT_THROW(denoising_divergence(field, Vec::Zero(2), 1e-3, 0, rng), Error);
}

// ---------------------------------------------------------------------------
// Objective

TEST(MsbtmLoss, ZeroNetwork) {
  ScoreNet net({2, 8, 2});
  RngStream rng(1, 1);
  const auto lg = msbtm_loss_and_grad(net, harmonic_samples(10, 1), all_coords(2), 1e-4, 2, rng);
  EXPECT_EQ(lg.loss, 0.0);
  // Antithetic terms cancel up to summation rounding.
  EXPECT_LT(lg.grad.lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(MsbtmLoss, IdentityFieldOnTwoSamples) {
  // (1/2)[(|x₁|² + 2·2) + (|x₂|² + 2·2)] = 5 with the exact divergence.
  const ScoreNet net = linear_net(Mat::Identity(2, 2), Vec::Zero(2));
  Mat samples(2, 2);
  samples << 1, 0, 0, 1;
  RngStream rng(7, 7);
  const int m = 20000;
  const auto lg = msbtm_loss_and_grad(net, samples, all_coords(2), 1e-4, m, rng);
  // Loss = 1 + 2·mean|ξ|² over 2M probes.
  EXPECT_NEAR(lg.loss, 5.0, 4.0 * 2.0 * std::sqrt(4.0 / (2.0 * m)));
}

TEST(MsbtmLoss, GradientMatchesFiniteDifferences) {
  RngStream init(8, 8);
  ScoreNet net = ScoreNet::glorot_uniform({2, 6, 6, 2}, init);
  const Mat samples = harmonic_samples(5, 2);
  const double kappa = 0.05;
  const RngStream probes(9, 9);
  RngStream r = probes;
  const auto lg = msbtm_loss_and_grad(net, samples, all_coords(2), kappa, 3, r);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < net.param_count(); ++i) {
    const double saved = net.params()(i);
    net.params()(i) = saved + h;
    RngStream ru = probes;
    const double up = msbtm_loss_and_grad(net, samples, all_coords(2), kappa, 3, ru).loss;
    net.params()(i) = saved - h;
    RngStream rd = probes;
    const double down = msbtm_loss_and_grad(net, samples, all_coords(2), kappa, 3, rd).loss;
    net.params()(i) = saved;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - lg.grad(i)) / std::max({std::abs(fd), std::abs(lg.grad(i)), 1e-4}));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(MsbtmLoss, MatchesScoreErrorIdentityOnGaussianData) {
  // For x ~ N(m, C) and affine s(x) = Bx + c:
  //   E[|s|² + 2∇·s] = E|s − g|² − E|g|²,  g = −C⁻¹(x − m)
  // with E|s − g|² = |P m + c − C⁻¹m|² + tr(P C Pᵀ), P = B + C⁻¹, E|g|² = tr C⁻¹.
  Vec m(2);
  m << 0.5, -1.0;
  Mat c(2, 2);
  c << 0.5, 0.1, 0.1, 0.3;
  Mat b(2, 2);
  b << -1.0, 0.4, 0.2, -2.5;
  Vec off(2);
  off << 0.3, -0.2;
  const Mat ci = spd_inverse_det(c).inverse;
  const Mat p = b + ci;
  const double err = (p * m + off - ci * m).squaredNorm() + (p * c * p.transpose()).trace();
  const double expected = err - ci.trace();

  const int n = 200000;
  const Mat x = gaussian_samples(m, c, n, 3);
  RngStream rng(4, 4);
  const auto lg = msbtm_loss_and_grad(linear_net(b, off), x, all_coords(2), 1e-4, 1, rng);
  EXPECT_NEAR(lg.loss, expected, 0.02 * std::abs(expected) + 0.05);
}

TEST(MsbtmLoss, RejectsShapeErrors) {
  RngStream rng(1, 1);
  ScoreNet net({2, 4, 2});
  EXPECT_THROW(msbtm_loss_and_grad(net, Mat::Zero(3, 4), all_coords(2), 1e-4, 1, rng), DimensionError);
  EXPECT_THROW(msbtm_loss_and_grad(net, Mat::Zero(2, 0), all_coords(2), 1e-4, 1, rng), DimensionError);
  const std::vector<int> one{1};
  EXPECT_THROW(msbtm_loss_and_grad(net, Mat::Zero(2, 4), one, 1e-4, 1, rng), DimensionError);
}

// ---------------------------------------------------------------------------
// Relative L2 loss and the initial fit

TEST(RelativeL2, ExactZeroAndDoubled) {
  const GaussianState g = harmonic_start();
  const Mat ci = spd_inverse_det(g.cov).inverse;
  const Mat x = harmonic_samples(50, 5);
  auto target = [&](const Vec& y) { return gaussian_score(g, y); };
  EXPECT_LT(relative_l2_loss(linear_net(-ci, ci * g.mean), x, target), 1e-28);
  EXPECT_DOUBLE_EQ(relative_l2_loss(ScoreNet({2, 2}), x, target), 1.0);
  EXPECT_NEAR(relative_l2_loss(linear_net(-2.0 * ci, 2.0 * ci * g.mean), x, target), 1.0, 1e-12);
}

TEST(RelativeL2, ZeroDenominatorIsAnError) {
  const GaussianState g = harmonic_start();
  const Mat at_mean = g.mean.replicate(1, 4);
  auto target = [&](const Vec& y) { return gaussian_score(g, y); };
  EXPECT_THROW(relative_l2_loss(ScoreNet({2, 2}), at_mean, target), Error);
}

TEST(RelativeL2, GradientMatchesFiniteDifferences) {
  RngStream init(6, 6);
  ScoreNet net = ScoreNet::glorot_uniform({2, 5, 2}, init);
  const Mat x = harmonic_samples(8, 6);
  const Mat t = gaussian_score_targets(harmonic_start(), x, all_coords(2));
  const auto lg = relative_l2_loss_and_grad(net, x, t);
  EXPECT_NEAR(lg.loss, relative_l2_loss(net, x, t), 1e-14);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < net.param_count(); ++i) {
    const double saved = net.params()(i);
    net.params()(i) = saved + h;
    const double up = relative_l2_loss(net, x, t);
    net.params()(i) = saved - h;
    const double down = relative_l2_loss(net, x, t);
    net.params()(i) = saved;
    EXPECT_NEAR((up - down) / (2 * h), lg.grad(i), 1e-6 * std::max(1.0, std::abs(lg.grad(i))));
  }
}

TEST(FitInitialScore, ReachesToleranceOnHarmonicStart) {
  TrainConfig cfg;
  RngStream init(1, stream_id(streams::kNetInit));
  const Mat x = harmonic_samples(300, 1);
  const FitResult fit =
      fit_initial_score(ScoreNet::glorot_uniform({2, 32, 32, 2}, init), x, harmonic_start(), all_coords(2), cfg);
  EXPECT_LT(fit.loss, 1e-4);
  EXPECT_GT(fit.iterations, 0);

  // Divergence of the analytic score is tr(−C₀⁻¹) = −8.
  RngStream probes(2, 2);
  const double div = denoising_divergence(fit.net, harmonic_start().mean, 1e-4, 1000, probes);
  EXPECT_NEAR(div, -8.0, 0.8);
}

TEST(FitInitialScore, ExactStartTakesNoIterations) {
  const GaussianState g = harmonic_start();
  const Mat ci = spd_inverse_det(g.cov).inverse;
  const FitResult fit =
      fit_initial_score(linear_net(-ci, ci * g.mean), harmonic_samples(300, 1), g, all_coords(2), TrainConfig{});
  EXPECT_EQ(fit.iterations, 0);
  EXPECT_LT(fit.loss, 1e-4);
}

TEST(FitInitialScore, ReportsFailure) {
  TrainConfig cfg;
  cfg.init_max_iters = 3;
  RngStream init(1, 1);
  try {
    fit_initial_score(ScoreNet::glorot_uniform({2, 8, 2}, init), harmonic_samples(50, 1), harmonic_start(),
                      all_coords(2), cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.iterations(), 3);
    EXPECT_GT(e.last_value(), 1e-4);
  }
}

// ---------------------------------------------------------------------------
// Per-step training

TEST(TrainConfig, GtolSchedule) {
  const TrainConfig cfg;
  EXPECT_EQ(gtol_at(cfg, 1), 0.3);
  EXPECT_EQ(gtol_at(cfg, 2000), 0.3);
  EXPECT_EQ(gtol_at(cfg, 2001), 0.35);
  EXPECT_EQ(gtol_at(cfg, 9000), 0.35);
  EXPECT_EQ(gtol_at(cfg, 9001), 0.4);
  EXPECT_EQ(gtol_at(cfg, 1000000), 0.4);
}

TEST(TrainConfig, Violations) {
  EXPECT_TRUE(violations(TrainConfig{}).empty());
  TrainConfig bad;
  bad.kappa = 0;
  bad.probes = 0;
  bad.tol_init = -1;
  bad.gtol = {{10, 0.3}, {5, -1.0}};
  const auto v = violations(bad);
  EXPECT_GE(v.size(), 5u);
}

TEST(TrainStep, StationaryNetStopsImmediately) {
  // The all-zero network is a stationary point of the objective.
  ScoreNet net({2, 16, 16, 2});
  AdamState adam(net.param_count(), 1e-4);
  RngStream rng(1, 1);
  const auto r = train_step_score(net, adam, harmonic_samples(100, 1), all_coords(2), TrainConfig{}, 1, rng);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_LT(r.grad_norm, 0.3);
  EXPECT_EQ(adam.step, 0);
  EXPECT_TRUE(r.net == net);
}

TEST(TrainStep, CapLimitsUpdates) {
  TrainConfig cfg;
  cfg.gtol = {{kOpenEnded, 1e-12}};
  cfg.max_grad_steps = 3;
  RngStream init(2, 2);
  const ScoreNet net = ScoreNet::glorot_uniform({2, 8, 8, 8, 1}, init);
  AdamState adam(net.param_count(), 1e-4);
  RngStream rng(3, 3);
  const std::vector<int> noisy{1};
  const auto r = train_step_score(net, adam, harmonic_samples(50, 2), noisy, cfg, 7, rng);
  EXPECT_EQ(r.iterations, 3);
  EXPECT_EQ(adam.step, 3);
  EXPECT_FALSE(r.net == net);
}

TEST(TrainStep, UncappedFailureCarriesDiagnostics) {
  TrainConfig cfg;
  cfg.gtol = {{kOpenEnded, 1e-12}};
  cfg.max_iters = 10;
  RngStream init(2, 2);
  const ScoreNet net = ScoreNet::glorot_uniform({2, 8, 2}, init);
  AdamState adam(net.param_count(), 1e-4);
  RngStream rng(3, 3);
  try {
    train_step_score(net, adam, harmonic_samples(50, 2), all_coords(2), cfg, 42, rng);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 42);
    EXPECT_EQ(e.iterations(), 10);
    EXPECT_GT(e.last_value(), 0.0);
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
}

TEST(TrainStep, LossDecreasesAlmostEveryIteration) {
  // Full objective on a fixed sample set and a fixed large probe set, after
  // each Adam update driven by fresh single-probe gradients.
  const Mat x = harmonic_samples(300, 4);
  RngStream init(5, 5);
  ScoreNet net = ScoreNet::glorot_uniform({2, 32, 32, 2}, init);
  AdamState adam(net.param_count(), 1e-3);
  const RngStream eval_probes(6, 6);
  auto full_loss = [&](const ScoreNet& n) {
    RngStream r = eval_probes;
    return msbtm_loss_and_grad(n, x, all_coords(2), 1e-4, 20, r).loss;
  };
  RngStream rng(7, 7);
  double prev = full_loss(net);
  int decreases = 0;
  const int iters = 100;
  for (int i = 0; i < iters; ++i) {
    const auto lg = msbtm_loss_and_grad(net, x, all_coords(2), 1e-4, 1, rng);
    adam_step(adam, net.params(), lg.grad);
    const double now = full_loss(net);
    if (now < prev) ++decreases;
    prev = now;
  }
  EXPECT_GE(decreases, 95);
}

TEST(TrainStep, TrainingRecoversGaussianScore) {
  // Minimiser of the objective is the score of the sample law.
  const GaussianState g = harmonic_start();
  const Mat x = harmonic_samples(1000, 8);
  RngStream init(9, 9);
  ScoreNet net = ScoreNet::glorot_uniform({2, 32, 32, 2}, init);
  AdamState adam(net.param_count(), 2e-3);
  RngStream rng(10, 10);
  for (int i = 0; i < 1000; ++i) {
    const auto lg = msbtm_loss_and_grad(net, x, all_coords(2), 1e-4, 1, rng);
    adam_step(adam, net.params(), lg.grad);
  }
  const Mat t = gaussian_score_targets(g, x, all_coords(2));
  EXPECT_LT(relative_l2_loss(net, x, t), 0.05);
}
