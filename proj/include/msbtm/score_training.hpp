#pragma once

// Score-matching objective and the per-timestep training loop.
//
// For samples X_i the network minimises
//   L(s) = (1/N) Σ_i [ |s(X_i)|² + 2 ∇·s(X_i) ]
// whose minimiser is ∇log ρ on the sample law. The divergence is replaced by
// the antithetic denoising estimate, so the gradient flows through
// s(X_i ± κξ) with fresh ξ drawn every iteration.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "msbtm/analytic_oracle.hpp"
#include "msbtm/denoising.hpp"
#include "msbtm/error.hpp"
#include "msbtm/mlp.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

/// Gradient-norm threshold applied to training steps k <= last_step.
struct GtolStage {
  long last_step;
  double threshold;
};

inline constexpr long kOpenEnded = std::numeric_limits<long>::max();

struct TrainConfig {
  double kappa = 1e-4;
  int probes = 1;
  std::vector<GtolStage> gtol = {{2000, 0.3}, {9000, 0.35}, {kOpenEnded, 0.4}};
  long max_iters = 5000;
  long max_grad_steps = 0;  // 0 disables the step cap
  double learning_rate = 1e-4;
  double tol_init = 1e-4;
  double init_learning_rate = 1e-3;
  long init_max_iters = 200000;
  std::vector<int> hidden = {32, 32};
  int metrics_probes = 1000;
};

inline std::vector<std::string> violations(const TrainConfig& c) {
  std::vector<std::string> v;
  if (!(c.kappa > 0.0)) v.push_back("train.kappa must be > 0");
  if (c.probes < 1) v.push_back("train.probes must be >= 1");
  if (c.metrics_probes < 1) v.push_back("train.metrics_probes must be >= 1");
  if (c.gtol.empty()) v.push_back("train.gtol needs at least one stage");
  long prev = -1;
  for (const auto& s : c.gtol) {
    if (!(s.threshold > 0.0)) v.push_back("train.gtol thresholds must be > 0");
    if (s.last_step <= prev) v.push_back("train.gtol stage bounds must increase");
    prev = s.last_step;
  }
  if (!c.gtol.empty() && c.gtol.back().last_step != kOpenEnded) {
    v.push_back("train.gtol last stage must be open-ended (inf)");
  }
  if (c.max_iters < 1) v.push_back("train.max_iters must be >= 1");
  if (c.max_grad_steps < 0) v.push_back("train.max_grad_steps must be >= 0");
  if (!(c.learning_rate > 0.0)) v.push_back("train.learning_rate must be > 0");
  if (!(c.init_learning_rate > 0.0)) v.push_back("train.init_learning_rate must be > 0");
  if (!(c.tol_init > 0.0)) v.push_back("train.tol_init must be > 0");
  if (c.init_max_iters < 0) v.push_back("train.init_max_iters must be >= 0");
  if (c.hidden.empty()) v.push_back("train.hidden needs at least one layer");
  for (int h : c.hidden) {
    if (h < 1) v.push_back("train.hidden widths must be >= 1");
  }
  return v;
}

inline double gtol_at(const TrainConfig& c, long step) {
  for (const auto& s : c.gtol) {
    if (step <= s.last_step) return s.threshold;
  }
  return c.gtol.back().threshold;
}

inline std::vector<int> all_coords(int d) {
  std::vector<int> out(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) out[i] = i;
  return out;
}

// ---------------------------------------------------------------------------

struct LossAndGrad {
  double loss;
  Vec grad;
};

/// Score-matching objective on the sample columns with `probes` fresh ξ per
/// sample drawn from rng, and its exact parameter gradient.
inline LossAndGrad msbtm_loss_and_grad(const ScoreNet& net, const Mat& samples,
                                       std::span<const int> noisy, double kappa, int probes,
                                       RngStream& rng) {
  const Eigen::Index n = samples.cols();
  const auto k = static_cast<Eigen::Index>(noisy.size());
  if (n < 1) throw DimensionError("msbtm_loss: empty sample set");
  if (samples.rows() != net.input_dim()) throw DimensionError("msbtm_loss: state/net dimension mismatch");
  if (net.output_dim() != k) throw DimensionError("msbtm_loss: net output must match noisy coordinates");
  if (!(kappa > 0.0) || probes < 1) throw Error("msbtm_loss: kappa > 0 and probes >= 1 required");

  const Eigen::Index np = n * probes;
  Mat x(samples.rows(), n + 2 * np);
  Mat xi(k, np);
  x.leftCols(n) = samples;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int m = 0; m < probes; ++m) {
      const Eigen::Index c = i * probes + m;
      xi.col(c) = rng.normal_vec(k);
      Vec plus = samples.col(i);
      Vec minus = samples.col(i);
      for (Eigen::Index a = 0; a < k; ++a) {
        plus(noisy[a]) += kappa * xi(a, c);
        minus(noisy[a]) -= kappa * xi(a, c);
      }
      x.col(n + c) = plus;
      x.col(n + np + c) = minus;
    }
  }

  ForwardCache cache;
  const Mat s = net.forward_batch(x, cache);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double probe_scale = 1.0 / (kappa * static_cast<double>(np));

  const double norm_term = s.leftCols(n).squaredNorm() * inv_n;
  const double div_term =
      probe_scale * ((s.middleCols(n, np) - s.rightCols(np)).cwiseProduct(xi)).sum();
  const double loss = norm_term + div_term;
  if (!std::isfinite(loss)) throw NonFiniteError("msbtm_loss: non-finite loss");

  Mat upstream(k, n + 2 * np);
  upstream.leftCols(n) = 2.0 * inv_n * s.leftCols(n);
  upstream.middleCols(n, np) = probe_scale * xi;
  upstream.rightCols(np) = -probe_scale * xi;
  BatchGradients g = net.backward_batch(cache, upstream);
  return {loss, std::move(g.params)};
}

/// Σ|s − g|² / Σ|g|² over sample columns, targets given column-wise.
inline double relative_l2_loss(const ScoreNet& net, const Mat& samples, const Mat& targets) {
  const double denom = targets.squaredNorm();
  if (!(denom > 0.0)) throw Error("relative_l2_loss: target score vanishes on every sample");
  return (net.forward_batch(samples) - targets).squaredNorm() / denom;
}

template <class TargetFn>
double relative_l2_loss(const ScoreNet& net, const Mat& samples, const TargetFn& target) {
  Mat targets(net.output_dim(), samples.cols());
  for (Eigen::Index i = 0; i < samples.cols(); ++i) targets.col(i) = target(Vec(samples.col(i)));
  return relative_l2_loss(net, samples, targets);
}

inline LossAndGrad relative_l2_loss_and_grad(const ScoreNet& net, const Mat& samples,
                                             const Mat& targets) {
  const double denom = targets.squaredNorm();
  if (!(denom > 0.0)) throw Error("relative_l2_loss: target score vanishes on every sample");
  ForwardCache cache;
  const Mat r = net.forward_batch(samples, cache) - targets;
  BatchGradients g = net.backward_batch(cache, (2.0 / denom) * r);
  return {r.squaredNorm() / denom, std::move(g.params)};
}

/// Targets −C⁻¹(x − m) restricted to `noisy`, one column per sample.
inline Mat gaussian_score_targets(const GaussianState& g, const Mat& samples,
                                  std::span<const int> noisy) {
  const Mat inv = spd_inverse_det(g.cov).inverse;
  const Mat full = -inv * (samples.colwise() - g.mean);
  Mat out(static_cast<Eigen::Index>(noisy.size()), samples.cols());
  for (std::size_t a = 0; a < noisy.size(); ++a) out.row(a) = full.row(noisy[a]);
  return out;
}

struct FitResult {
  ScoreNet net;
  long iterations;
  double loss;
};

/// Fits the network to the analytic Gaussian score of the initial density
/// by full-batch Adam on the relative L2 loss.
inline FitResult fit_initial_score(ScoreNet net, const Mat& samples, const GaussianState& g,
                                   std::span<const int> noisy, const TrainConfig& cfg) {
  const Mat targets = gaussian_score_targets(g, samples, noisy);
  AdamState adam(net.param_count(), cfg.init_learning_rate);
  for (long it = 0;; ++it) {
    LossAndGrad lg = relative_l2_loss_and_grad(net, samples, targets);
    if (lg.loss < cfg.tol_init) return {std::move(net), it, lg.loss};
    if (it >= cfg.init_max_iters) {
      throw TrainingError("initial score fit stopped at relative loss " + std::to_string(lg.loss) +
                              " after " + std::to_string(it) + " iterations (tolerance " +
                              std::to_string(cfg.tol_init) + ")",
                          0, it, lg.loss);
    }
    adam_step(adam, net.params(), lg.grad);
  }
}

struct TrainStepResult {
  ScoreNet net;
  long iterations;
  double grad_norm;
  double loss;
};

/// Warm-started Adam on the score-matching objective until the L2 norm of
/// the parameter gradient drops below the stage threshold for `step`, or
/// until cfg.max_grad_steps updates when that cap is set.
inline TrainStepResult train_step_score(ScoreNet net, AdamState& adam, const Mat& samples,
                                        std::span<const int> noisy, const TrainConfig& cfg,
                                        long step, RngStream& rng) {
  const double gtol = gtol_at(cfg, step);
  for (long it = 0;; ++it) {
    LossAndGrad lg = msbtm_loss_and_grad(net, samples, noisy, cfg.kappa, cfg.probes, rng);
    const double gnorm = lg.grad.norm();
    if (!std::isfinite(gnorm)) {
      throw TrainingError("non-finite gradient at training step " + std::to_string(step), step, it,
                          gnorm);
    }
    if (gnorm < gtol) return {std::move(net), it, gnorm, lg.loss};
    if (cfg.max_grad_steps > 0 && it >= cfg.max_grad_steps) return {std::move(net), it, gnorm, lg.loss};
    if (it >= cfg.max_iters) {
      throw TrainingError("training step " + std::to_string(step) + " did not reach gtol " +
                              std::to_string(gtol) + " within " + std::to_string(it) +
                              " iterations (last gradient norm " + std::to_string(gnorm) +
                              ", loss " + std::to_string(lg.loss) + ")",
                          step, it, gnorm);
    }
    adam_step(adam, net.params(), lg.grad);
  }
}

}  // namespace msbtm
