#pragma once

// Comparisons between ensembles, scores and the Gaussian oracle.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "msbtm/analytic_oracle.hpp"
#include "msbtm/ensemble.hpp"
#include "msbtm/error.hpp"
#include "msbtm/integrators.hpp"
#include "msbtm/numerics.hpp"
#include "msbtm/problems.hpp"

namespace msbtm {

struct Moments {
  Vec mean;
  Mat cov;
};

/// Sample mean and population-normalised (1/N) covariance.
inline Moments empirical_moments(const Mat& samples) {
  if (samples.cols() < 2) throw Error("empirical_moments: need at least two samples");
  const double n = static_cast<double>(samples.cols());
  Vec mean = samples.rowwise().mean();
  const Mat centered = samples.colwise() - mean;
  Mat cov = centered * centered.transpose() / n;
  return {std::move(mean), std::move(cov)};
}

inline Moments empirical_moments(const Ensemble& e) { return empirical_moments(e.states); }

/// Σ|s(X_i) − ∇log ρ(X_i)|² / Σ|∇log ρ(X_i)|² with ∇log ρ the Gaussian score.
/// `scores` holds one column per sample over the full state.
inline double relative_fisher(const Mat& scores, const Mat& samples, const GaussianState& g) {
  const Mat inv = spd_inverse_det(g.cov).inverse;
  const Mat target = -inv * (samples.colwise() - g.mean);
  if (scores.rows() != target.rows() || scores.cols() != target.cols()) {
    throw DimensionError("relative_fisher: score/sample shape mismatch");
  }
  const double denom = target.squaredNorm();
  if (!(denom > 0.0)) throw Error("relative_fisher: target score vanishes on every sample");
  return (scores - target).squaredNorm() / denom;
}

template <class ScoreFn>
  requires std::invocable<const ScoreFn&, const Vec&>
double relative_fisher(const ScoreFn& score, const Mat& samples, const GaussianState& g) {
  Mat s(samples.rows(), samples.cols());
  for (Eigen::Index i = 0; i < samples.cols(); ++i) s.col(i) = score(Vec(samples.col(i)));
  return relative_fisher(s, samples, g);
}

/// −(1/N) Σ s(X_i)·v(X_i) with v = b − D s over the noisy coordinates;
/// `scores` has one column per particle over the noisy coordinates.
inline double numerical_entropy_rate(const Mat& scores, const MeanFieldProblem& p, const Ensemble& e) {
  if (scores.cols() != e.size()) throw DimensionError("numerical_entropy_rate: one score per particle");
  const Mat v = mean_field_drifts(p, e) - diffusion_times_score(p, scores);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    for (int a = 0; a < p.score_dim(); ++a) acc += scores(a, i) * v(p.noisy_coords[a], i);
  }
  return -acc / static_cast<double>(e.size());
}

inline double numerical_entropy_rate(const ScoreModel& score, const MeanFieldProblem& p,
                                     const Ensemble& e) {
  return numerical_entropy_rate(score.evaluate(e.states), p, e);
}

inline double numerical_entropy_rate(const ScoreNet& net, const MeanFieldProblem& p, const Ensemble& e) {
  return numerical_entropy_rate(net.forward_batch(e.states), p, e);
}

// ---------------------------------------------------------------------------
// Grid total variation

struct GridSpec {
  Vec lower;
  Vec upper;
  std::vector<int> cells;

  static GridSpec square(double lo = -3.0, double hi = 3.0, int n = 12) {
    GridSpec g;
    g.lower = Vec::Constant(2, lo);
    g.upper = Vec::Constant(2, hi);
    g.cells = {n, n};
    return g;
  }
};

inline std::vector<std::string> violations(const GridSpec& g) {
  std::vector<std::string> v;
  if (g.lower.size() != g.upper.size() || g.lower.size() != static_cast<Eigen::Index>(g.cells.size()) ||
      g.lower.size() == 0) {
    v.push_back("grid lower/upper/cells must have the same nonzero length");
    return v;
  }
  for (Eigen::Index a = 0; a < g.lower.size(); ++a) {
    if (!(g.upper(a) > g.lower(a))) v.push_back("grid upper must exceed lower on every axis");
    if (g.cells[a] < 1) v.push_back("grid cells must be >= 1 on every axis");
  }
  return v;
}

/// Cell index per sample; samples outside the box map to the overflow bin
/// (index = total cell count).
inline std::vector<double> grid_histogram(const Mat& samples, const GridSpec& g) {
  if (auto v = violations(g); !v.empty()) throw ConfigError(std::move(v));
  if (samples.rows() != g.lower.size()) throw DimensionError("grid_histogram: dimension mismatch");
  if (samples.cols() < 1) throw Error("grid_histogram: empty sample set");
  std::size_t total = 1;
  for (int c : g.cells) total *= static_cast<std::size_t>(c);
  std::vector<double> hist(total + 1, 0.0);
  for (Eigen::Index i = 0; i < samples.cols(); ++i) {
    std::size_t index = 0;
    bool inside = true;
    for (Eigen::Index a = samples.rows(); a-- > 0;) {
      const double x = samples(a, i);
      const double width = (g.upper(a) - g.lower(a)) / g.cells[a];
      const double f = std::floor((x - g.lower(a)) / width);
      if (!(f >= 0.0 && f < g.cells[a])) {
        inside = false;
        break;
      }
      index = index * static_cast<std::size_t>(g.cells[a]) + static_cast<std::size_t>(f);
    }
    hist[inside ? index : total] += 1.0;
  }
  for (double& h : hist) h /= static_cast<double>(samples.cols());
  return hist;
}

/// Σ_cells |P_A − P_B| over grid-cell frequencies, overflow bin included.
inline double total_variation(const Mat& a, const Mat& b, const GridSpec& g) {
  if (a.cols() < 1 || b.cols() < 1) throw Error("total_variation: empty sample set");
  const auto ha = grid_histogram(a, g);
  const auto hb = grid_histogram(b, g);
  double tv = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i) tv += std::abs(ha[i] - hb[i]);
  return tv;
}

/// (c/2)(1/N) Σ |s(X_i) − target(X_i)|², the discretised KL-rate bound with
/// a caller-supplied constant c.
inline double kl_rate_diagnostic(const Mat& scores, const Mat& targets, double constant) {
  if (scores.rows() != targets.rows() || scores.cols() != targets.cols() || scores.cols() < 1) {
    throw DimensionError("kl_rate_diagnostic: shape mismatch");
  }
  return 0.5 * constant * (scores - targets).squaredNorm() / static_cast<double>(scores.cols());
}

// ---------------------------------------------------------------------------
// metrics.csv rows

struct MetricsRecord {
  long step = 0;
  double t = 0.0;
  std::optional<double> trace_msbtm;
  std::optional<double> trace_sde;
  std::optional<double> trace_nf;
  std::optional<double> trace_analytic;
  std::optional<double> fisher_train;
  std::optional<double> fisher_sde;
  std::optional<double> ent_rate_num;
  std::optional<double> ent_rate_analytic;
  std::optional<double> tv;
  std::optional<double> kl_rate_diag;
};

inline constexpr const char* kMetricsHeader =
    "step,t,trace_msbtm,trace_sde,trace_nf,trace_analytic,fisher_train,fisher_sde,ent_rate_num,"
    "ent_rate_analytic,tv,kl_rate_diag";

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string to_csv_row(const MetricsRecord& r) {
  std::string out = std::to_string(r.step) + "," + format_real(r.t);
  for (const auto* f : {&r.trace_msbtm, &r.trace_sde, &r.trace_nf, &r.trace_analytic, &r.fisher_train,
                        &r.fisher_sde, &r.ent_rate_num, &r.ent_rate_analytic, &r.tv, &r.kl_rate_diag}) {
    out += ",";
    if (*f) out += format_real(**f);
  }
  return out;
}

}  // namespace msbtm
