#pragma once

// Mean-field Fokker–Planck problem instances:
//   ∂ρ/∂t = −∇·((f_t(x) − ∫K(x,y)ρ_t(y)dy) ρ − D ∇ρ)
// with constant diffusion D that may be degenerate outside a declared set of
// noisy coordinates.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "msbtm/error.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

struct MeanFieldProblem {
  std::string name;
  int dim = 0;

  std::function<Vec(double t, const Vec& x)> drift;
  std::function<Vec(const Vec& x, const Vec& y)> kernel;
  /// Set when K(x, y) = A (x − y); enables O(N) interaction sums.
  std::optional<Mat> linear_kernel;

  /// Closed-form ∇·f_t(x).
  std::function<double(double t, const Vec& x)> drift_divergence;
  /// Closed-form ∇_x·K(x, y).
  std::function<double(const Vec& x, const Vec& y)> kernel_divergence;

  /// Constant diffusion matrix, d x d, zero outside noisy_coords.
  Mat diffusion;
  std::vector<int> noisy_coords;

  int score_dim() const noexcept { return static_cast<int>(noisy_coords.size()); }

  /// D restricted to the noisy coordinates.
  Mat noisy_diffusion() const {
    const auto k = static_cast<Eigen::Index>(noisy_coords.size());
    Mat out(k, k);
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) out(a, b) = diffusion(noisy_coords[a], noisy_coords[b]);
    }
    return out;
  }

  /// Lower Cholesky factor σ of the noisy block, σσᵀ = D_noisy.
  Mat noise_factor() const { return cholesky_lower(noisy_diffusion()); }
};

/// Checks shapes and the diffusion structure; throws on violation.
inline void validate(const MeanFieldProblem& p) {
  if (p.dim < 1) throw DimensionError("problem dimension must be >= 1");
  if (!p.drift || !p.kernel || !p.drift_divergence || !p.kernel_divergence) {
    throw Error("problem '" + p.name + "' is missing drift/kernel callables");
  }
  if (p.diffusion.rows() != p.dim || p.diffusion.cols() != p.dim) {
    throw DimensionError("diffusion must be d x d");
  }
  require_symmetric(p.diffusion, "diffusion");
  if (p.noisy_coords.empty()) throw Error("problem needs at least one noisy coordinate");
  std::vector<bool> noisy(p.dim, false);
  for (int c : p.noisy_coords) {
    if (c < 0 || c >= p.dim || noisy[c]) throw Error("noisy_coords must be distinct indices in [0, d)");
    noisy[c] = true;
  }
  for (int i = 0; i < p.dim; ++i) {
    for (int j = 0; j < p.dim; ++j) {
      if ((!noisy[i] || !noisy[j]) && p.diffusion(i, j) != 0.0) {
        throw Error("diffusion must vanish outside the noisy coordinates");
      }
    }
  }
  cholesky_lower(p.noisy_diffusion());
  if (p.linear_kernel && (p.linear_kernel->rows() != p.dim || p.linear_kernel->cols() != p.dim)) {
    throw DimensionError("linear kernel matrix must be d x d");
  }
}

// ---------------------------------------------------------------------------
// Harmonic trap with harmonic repulsion

struct HarmonicParams {
  double trap_radius = 2.0;        // a
  double trap_frequency = 1.0;     // ω
  double repulsion = 0.5;          // α ∈ (0, 1)
  double diffusion = 0.25;         // D
  double initial_variance = 0.25;  // σ₀²
};

inline void validate(const HarmonicParams& p) {
  std::vector<std::string> v;
  if (!(p.repulsion > 0.0 && p.repulsion < 1.0)) v.push_back("harmonic alpha must lie in (0, 1)");
  if (!(p.diffusion > 0.0)) v.push_back("harmonic D must be > 0");
  if (!(p.initial_variance > 0.0)) v.push_back("harmonic sigma0_sq must be > 0");
  if (!std::isfinite(p.trap_radius) || !std::isfinite(p.trap_frequency)) {
    v.push_back("harmonic trap parameters must be finite");
  }
  if (!v.empty()) throw ConfigError(std::move(v));
}

/// Trap centre β_t = a (cos πωt, sin πωt).
inline Vec trap_center(const HarmonicParams& p, double t) {
  Vec beta(2);
  const double phase = std::numbers::pi * p.trap_frequency * t;
  beta << p.trap_radius * std::cos(phase), p.trap_radius * std::sin(phase);
  return beta;
}

inline MeanFieldProblem harmonic_problem(const HarmonicParams& p) {
  validate(p);
  constexpr int d = 2;
  MeanFieldProblem prob;
  prob.name = "harmonic";
  prob.dim = d;
  prob.drift = [p](double t, const Vec& x) -> Vec { return trap_center(p, t) - x; };
  const double alpha = p.repulsion;
  prob.kernel = [alpha](const Vec& x, const Vec& y) -> Vec { return alpha * (x - y); };
  prob.linear_kernel = alpha * Mat::Identity(d, d);
  prob.drift_divergence = [](double, const Vec&) { return -static_cast<double>(d); };
  prob.kernel_divergence = [alpha](const Vec&, const Vec&) { return alpha * d; };
  prob.diffusion = p.diffusion * Mat::Identity(d, d);
  prob.noisy_coords = {0, 1};
  validate(prob);
  return prob;
}

// ---------------------------------------------------------------------------
// Active swimmer: state (x, v), noise in v only.

struct SwimmerParams {
  double damping = 0.1;        // γ
  double interaction = 0.5;    // α
  double diffusion = 1.0;      // D
  double initial_std = 1.0;    // σ₀
};

inline void validate(const SwimmerParams& p) {
  std::vector<std::string> v;
  if (!(p.damping > 0.0)) v.push_back("swimmer gamma must be > 0");
  if (!(p.diffusion > 0.0)) v.push_back("swimmer D must be > 0");
  if (!(p.initial_std > 0.0)) v.push_back("swimmer sigma0 must be > 0");
  if (!std::isfinite(p.interaction)) v.push_back("swimmer alpha must be finite");
  if (!v.empty()) throw ConfigError(std::move(v));
}

inline MeanFieldProblem swimmer_problem(const SwimmerParams& p) {
  validate(p);
  MeanFieldProblem prob;
  prob.name = "swimmer";
  prob.dim = 2;
  const double gamma = p.damping;
  const double alpha = p.interaction;
  prob.drift = [gamma](double, const Vec& s) -> Vec {
    Vec out(2);
    out << -s(0) * s(0) * s(0) + s(1), -gamma * s(1);
    return out;
  };
  prob.kernel = [alpha](const Vec& s, const Vec& r) -> Vec {
    Vec out(2);
    out << 0.0, alpha * (s(0) - r(0));
    return out;
  };
  Mat a = Mat::Zero(2, 2);
  a(1, 0) = alpha;
  prob.linear_kernel = a;
  prob.drift_divergence = [gamma](double, const Vec& s) { return -3.0 * s(0) * s(0) - gamma; };
  prob.kernel_divergence = [](const Vec&, const Vec&) { return 0.0; };
  prob.diffusion = Mat::Zero(2, 2);
  prob.diffusion(1, 1) = gamma * p.diffusion;
  prob.noisy_coords = {1};
  validate(prob);
  return prob;
}

}  // namespace msbtm
