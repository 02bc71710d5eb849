#pragma once

// Closed-form Gaussian solution of the harmonic-trap problem. With Gaussian
// initial data the density stays Gaussian; its moments obey
//   dm/dt = β_t − m
//   dC/dt = −2C − 2α (N−1)/N C + 2D I.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "msbtm/numerics.hpp"
#include "msbtm/problems.hpp"
#include "msbtm/score_model.hpp"

namespace msbtm {

struct GaussianState {
  Vec mean;
  Mat cov;
  double t = 0.0;
};

inline double interaction_factor(const HarmonicParams& p, long n_particles) {
  return p.repulsion * static_cast<double>(n_particles - 1) / static_cast<double>(n_particles);
}

inline GaussianState harmonic_initial_state(const HarmonicParams& p, double t0 = 0.0) {
  return {trap_center(p, t0), p.initial_variance * Mat::Identity(2, 2), t0};
}

namespace detail {

inline Vec mean_rate(const HarmonicParams& p, double t, const Vec& m) { return trap_center(p, t) - m; }

inline Mat cov_rate(const HarmonicParams& p, long n, const Mat& c) {
  return -2.0 * (1.0 + interaction_factor(p, n)) * c +
         2.0 * p.diffusion * Mat::Identity(c.rows(), c.cols());
}

}  // namespace detail

/// One explicit Euler step of the moment ODEs.
inline GaussianState moments_step(const GaussianState& g, const HarmonicParams& p, long n_particles,
                                  double dt) {
  return {g.mean + dt * detail::mean_rate(p, g.t, g.mean),
          g.cov + dt * detail::cov_rate(p, n_particles, g.cov), g.t + dt};
}

/// Classical RK4 step, for reference trajectories.
inline GaussianState moments_step_rk4(const GaussianState& g, const HarmonicParams& p,
                                      long n_particles, double dt) {
  const double t = g.t;
  const Vec km1 = detail::mean_rate(p, t, g.mean);
  const Vec km2 = detail::mean_rate(p, t + 0.5 * dt, g.mean + 0.5 * dt * km1);
  const Vec km3 = detail::mean_rate(p, t + 0.5 * dt, g.mean + 0.5 * dt * km2);
  const Vec km4 = detail::mean_rate(p, t + dt, g.mean + dt * km3);
  const Mat kc1 = detail::cov_rate(p, n_particles, g.cov);
  const Mat kc2 = detail::cov_rate(p, n_particles, g.cov + 0.5 * dt * kc1);
  const Mat kc3 = detail::cov_rate(p, n_particles, g.cov + 0.5 * dt * kc2);
  const Mat kc4 = detail::cov_rate(p, n_particles, g.cov + dt * kc3);
  return {g.mean + dt / 6.0 * (km1 + 2.0 * km2 + 2.0 * km3 + km4),
          g.cov + dt / 6.0 * (kc1 + 2.0 * kc2 + 2.0 * kc3 + kc4), t + dt};
}

/// Stationary covariance D / (1 + α(N−1)/N) · I.
inline Mat covariance_fixed_point(const HarmonicParams& p, long n_particles) {
  return p.diffusion / (1.0 + interaction_factor(p, n_particles)) * Mat::Identity(2, 2);
}

/// ∇log ρ_t(x) = −C⁻¹(x − m).
inline Vec gaussian_score(const GaussianState& g, const Vec& x) {
  if (x.size() != g.mean.size()) throw DimensionError("gaussian_score: dimension mismatch");
  const Mat inv = spd_inverse_det(g.cov).inverse;
  return -inv * (x - g.mean);
}

inline double gaussian_log_density(const GaussianState& g, const Vec& x) {
  const auto [inv, det] = spd_inverse_det(g.cov);
  const Vec r = x - g.mean;
  const double d = static_cast<double>(g.mean.size());
  return -0.5 * r.dot(inv * r) - 0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det);
}

inline double gaussian_density(const GaussianState& g, const Vec& x) {
  return std::exp(gaussian_log_density(g, x));
}

/// Differential entropy ½ d (log 2π + 1) + ½ log det C.
inline double analytic_entropy(const GaussianState& g) {
  const double d = static_cast<double>(g.mean.size());
  return 0.5 * d * (std::log(2.0 * std::numbers::pi) + 1.0) +
         0.5 * std::log(spd_inverse_det(g.cov).det);
}

/// dE/dt = ½ tr(C⁻¹ dC/dt) = −d (1 + α(N−1)/N) + D tr(C⁻¹).
inline double analytic_entropy_rate(const GaussianState& g, const HarmonicParams& p,
                                    long n_particles) {
  const double d = static_cast<double>(g.mean.size());
  const Mat inv = spd_inverse_det(g.cov).inverse;
  return -d * (1.0 + interaction_factor(p, n_particles)) + p.diffusion * inv.trace();
}

/// Gaussian score restricted to the noisy coordinates, with exact divergence.
class GaussianScore final : public ScoreModel {
 public:
  GaussianScore(GaussianState g, std::vector<int> noisy)
      : g_(std::move(g)), noisy_(std::move(noisy)), inv_(spd_inverse_det(g_.cov).inverse) {
    if (noisy_.empty()) {
      for (Eigen::Index i = 0; i < g_.mean.size(); ++i) noisy_.push_back(static_cast<int>(i));
    }
  }

  const GaussianState& state() const noexcept { return g_; }

  int input_dim() const override { return static_cast<int>(g_.mean.size()); }
  int output_dim() const override { return static_cast<int>(noisy_.size()); }

  Mat evaluate(const Mat& x) const override {
    const Mat full = -inv_ * (x.colwise() - g_.mean);
    Mat out(noisy_.size(), x.cols());
    for (std::size_t a = 0; a < noisy_.size(); ++a) out.row(a) = full.row(noisy_[a]);
    return out;
  }

  double weighted_divergence(const Vec&, std::span<const int> noisy, const Mat& weight,
                             RngStream&) const override {
    // ∂_a s_b = −(C⁻¹)_{b a} on the noisy block.
    double acc = 0.0;
    for (std::size_t a = 0; a < noisy.size(); ++a) {
      for (std::size_t b = 0; b < noisy.size(); ++b) acc -= weight(a, b) * inv_(noisy[b], noisy[a]);
    }
    return acc;
  }

 private:
  GaussianState g_;
  std::vector<int> noisy_;
  Mat inv_;
};

}  // namespace msbtm
