#pragma once

// Time steppers for interacting particle ensembles and pointwise density
// evaluation along the learned probability flow.
//
// All steppers are forward Euler. The probability flow moves each particle
// with v = b − D s, where b = f_t(x) − (1/N) Σ_j K(x, X_j) and s is the score
// over the noisy coordinates.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msbtm/analytic_oracle.hpp"
#include "msbtm/ensemble.hpp"
#include "msbtm/error.hpp"
#include "msbtm/mlp.hpp"
#include "msbtm/numerics.hpp"
#include "msbtm/problems.hpp"
#include "msbtm/score_model.hpp"
#include "msbtm/score_training.hpp"

namespace msbtm {

/// (1/N) Σ_j K(x, X_j) against the population columns.
inline Vec interaction_mean(const MeanFieldProblem& p, const Mat& population, const Vec& x) {
  if (p.linear_kernel) {
    return *p.linear_kernel * (x - population.rowwise().mean());
  }
  Vec acc = Vec::Zero(x.size());
  for (Eigen::Index j = 0; j < population.cols(); ++j) acc += p.kernel(x, population.col(j));
  return acc / static_cast<double>(population.cols());
}

/// Interaction means for every particle of the population, self-term included.
inline Mat interaction_means(const MeanFieldProblem& p, const Mat& population) {
  if (p.linear_kernel) {
    const Vec mean = population.rowwise().mean();
    return *p.linear_kernel * (population.colwise() - mean);
  }
  Mat out(population.rows(), population.cols());
  for (Eigen::Index i = 0; i < population.cols(); ++i) {
    out.col(i) = interaction_mean(p, population, population.col(i));
  }
  return out;
}

inline Vec mean_field_drift(const MeanFieldProblem& p, const Ensemble& e, Eigen::Index i) {
  if (i < 0 || i >= e.size()) throw DimensionError("mean_field_drift: particle index out of range");
  const Vec x = e.states.col(i);
  return p.drift(e.t, x) - interaction_mean(p, e.states, x);
}

inline Mat mean_field_drifts(const MeanFieldProblem& p, const Ensemble& e) {
  Mat b = -interaction_means(p, e.states);
  for (Eigen::Index i = 0; i < e.size(); ++i) b.col(i) += p.drift(e.t, e.states.col(i));
  return b;
}

/// Embeds D_noisy · s into full-state columns.
inline Mat diffusion_times_score(const MeanFieldProblem& p, const Mat& scores) {
  if (scores.rows() != p.score_dim()) {
    throw DimensionError("score output size differs from the problem's noisy coordinates");
  }
  const Mat ds = p.noisy_diffusion() * scores;
  Mat out = Mat::Zero(p.dim, scores.cols());
  for (int a = 0; a < p.score_dim(); ++a) out.row(p.noisy_coords[a]) = ds.row(a);
  return out;
}

namespace detail {

inline void check_finite_step(const Mat& states, const char* what) {
  for (Eigen::Index i = 0; i < states.cols(); ++i) {
    if (!states.col(i).allFinite()) {
      throw NonFiniteError(std::string(what) + ": particle " + std::to_string(i) +
                           " left the finite range");
    }
  }
}

}  // namespace detail

/// Probability-flow step with precomputed scores (one column per particle).
inline Ensemble msbtm_step(const MeanFieldProblem& p, const Ensemble& e, const Mat& scores, double dt) {
  if (dt < 0.0) throw Error("msbtm_step: dt must be >= 0");
  Ensemble out{e.t + dt, e.states + dt * (mean_field_drifts(p, e) - diffusion_times_score(p, scores))};
  detail::check_finite_step(out.states, "msbtm_step");
  return out;
}

inline Ensemble msbtm_step(const MeanFieldProblem& p, const Ensemble& e, const ScoreModel& score,
                           double dt) {
  return msbtm_step(p, e, score.evaluate(e.states), dt);
}

inline Ensemble msbtm_step(const MeanFieldProblem& p, const Ensemble& e, const ScoreNet& net,
                           double dt) {
  return msbtm_step(p, e, net.forward_batch(e.states), dt);
}

/// Euler–Maruyama: X' = X + Δt b + √(2Δt) σ z, z drawn per particle from its
/// own stream. ∇·D vanishes for the constant diffusion of MeanFieldProblem.
inline Ensemble em_step(const MeanFieldProblem& p, const Ensemble& e, double dt,
                        std::span<RngStream> particle_rngs) {
  if (dt < 0.0) throw Error("em_step: dt must be >= 0");
  if (static_cast<Eigen::Index>(particle_rngs.size()) != e.size()) {
    throw DimensionError("em_step: need one random stream per particle");
  }
  // A vanishing diffusion reduces this to the noise-free step.
  const Mat sigma = p.noisy_diffusion().isZero(0.0) ? Mat(Mat::Zero(p.score_dim(), p.score_dim()))
                                                     : p.noise_factor();
  const double scale = std::sqrt(2.0 * dt);
  Ensemble out{e.t + dt, e.states + dt * mean_field_drifts(p, e)};
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const Vec kick = scale * sigma * particle_rngs[i].normal_vec(p.score_dim());
    for (int a = 0; a < p.score_dim(); ++a) out.states(p.noisy_coords[a], i) += kick(a);
  }
  detail::check_finite_step(out.states, "em_step");
  return out;
}

inline std::vector<RngStream> sde_streams(std::uint64_t seed, Eigen::Index n) {
  std::vector<RngStream> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    out.emplace_back(seed, stream_id(streams::kSdeNoise, static_cast<std::uint64_t>(i)));
  }
  return out;
}

inline Ensemble noise_free_step(const MeanFieldProblem& p, const Ensemble& e, double dt) {
  if (dt < 0.0) throw Error("noise_free_step: dt must be >= 0");
  Ensemble out{e.t + dt, e.states + dt * mean_field_drifts(p, e)};
  detail::check_finite_step(out.states, "noise_free_step");
  return out;
}

// ---------------------------------------------------------------------------
// Flow history

/// Per-step scores and populations of one flow run, t_k = t0 + k Δt.
class FlowCheckpointStore {
 public:
  FlowCheckpointStore() = default;
  FlowCheckpointStore(double t0, double dt) : t0_(t0), dt_(dt) {
    if (!(dt > 0.0)) throw Error("FlowCheckpointStore: dt must be > 0");
  }

  void append(Mat population, std::shared_ptr<const ScoreModel> score) {
    if (!score) throw Error("FlowCheckpointStore: null score");
    if (!populations_.empty() && population.rows() != populations_.front().rows()) {
      throw DimensionError("FlowCheckpointStore: population dimension changed");
    }
    populations_.push_back(std::move(population));
    scores_.push_back(std::move(score));
  }

  std::size_t size() const noexcept { return scores_.size(); }
  double t0() const noexcept { return t0_; }
  double dt() const noexcept { return dt_; }
  double time(std::size_t k) const noexcept { return t0_ + static_cast<double>(k) * dt_; }
  const Mat& population(std::size_t k) const { return populations_.at(k); }
  const ScoreModel& score(std::size_t k) const { return *scores_.at(k); }
  std::shared_ptr<const ScoreModel> score_ptr(std::size_t k) const { return scores_.at(k); }

  /// Index of the stored time matching t, if any.
  std::optional<std::size_t> index_of(double t) const {
    const double k = std::round((t - t0_) / dt_);
    if (k < 0.0 || k >= static_cast<double>(size())) return std::nullopt;
    const auto idx = static_cast<std::size_t>(k);
    if (std::abs(time(idx) - t) > 1e-6 * dt_) return std::nullopt;
    return idx;
  }

 private:
  double t0_ = 0.0;
  double dt_ = 1.0;
  std::vector<Mat> populations_;
  std::vector<std::shared_ptr<const ScoreModel>> scores_;
};

/// log ρ_t(x) = log ρ₀(X_{t,0}(x)) − ∫₀ᵗ ∇·v(X_{t,τ}(x)) dτ, integrating the
/// flow backward step by step. The interaction term at step j is frozen
/// against the stored population j.
inline double evaluate_log_density(const FlowCheckpointStore& store, const MeanFieldProblem& p,
                                   const Vec& x, double t,
                                   const std::function<double(const Vec&)>& log_rho0,
                                   RngStream& rng) {
  const auto k = store.index_of(t);
  if (!k) throw Error("evaluate_density: t = " + std::to_string(t) + " is not a stored time");
  if (x.size() != p.dim || !x.allFinite()) throw DimensionError("evaluate_density: bad query point");
  const Mat dn = p.noisy_diffusion();
  const double dt = store.dt();
  Vec y = x;
  double integral = 0.0;
  for (std::size_t j = *k; j-- > 0;) {
    const double tj = store.time(j);
    const Mat& pop = store.population(j);
    const ScoreModel& score = store.score(j);

    Vec v = p.drift(tj, y) - interaction_mean(p, pop, y);
    const Vec ds = dn * score(y);
    for (int a = 0; a < p.score_dim(); ++a) v(p.noisy_coords[a]) -= ds(a);

    double kernel_div = 0.0;
    for (Eigen::Index i = 0; i < pop.cols(); ++i) kernel_div += p.kernel_divergence(y, pop.col(i));
    kernel_div /= static_cast<double>(pop.cols());
    const double div = p.drift_divergence(tj, y) - kernel_div -
                       score.weighted_divergence(y, p.noisy_coords, dn, rng);

    integral += dt * div;
    y -= dt * v;
    if (!y.allFinite() || !std::isfinite(integral)) {
      throw NonFiniteError("evaluate_density: backward trajectory left the finite range at step " +
                           std::to_string(j));
    }
  }
  return log_rho0(y) - integral;
}

inline double evaluate_density(const FlowCheckpointStore& store, const MeanFieldProblem& p,
                               const Vec& x, double t,
                               const std::function<double(const Vec&)>& log_rho0, RngStream& rng) {
  return std::exp(evaluate_log_density(store, p, x, t, log_rho0, rng));
}

// ---------------------------------------------------------------------------
// Drivers

struct FlowParams {
  double dt = 5e-4;
  long n_steps = 0;
};

/// Supplies the score model for step k given the current ensemble.
using ScoreProvider = std::function<std::shared_ptr<const ScoreModel>(long k, const Ensemble&)>;
using FlowObserver = std::function<void(long k, const Ensemble&, const ScoreModel&)>;

/// Alternates score lookup and msbtm_step for k = 0..n_steps, storing every
/// step. The ensemble is not advanced past the last step.
inline FlowCheckpointStore run_flow(const MeanFieldProblem& p, Ensemble ensemble,
                                    const ScoreProvider& provider, const FlowParams& fp,
                                    const FlowObserver& observer = {}) {
  validate(ensemble);
  const double t0 = ensemble.t;
  FlowCheckpointStore store(t0, fp.dt);
  for (long k = 0; k <= fp.n_steps; ++k) {
    auto score = provider(k, ensemble);
    store.append(ensemble.states, score);
    if (observer) observer(k, ensemble, *score);
    if (k < fp.n_steps) {
      ensemble = msbtm_step(p, ensemble, *score, fp.dt);
      ensemble.t = t0 + static_cast<double>(k + 1) * fp.dt;
    }
  }
  return store;
}

struct TrainRecord {
  long step = 0;
  double t = 0.0;
  long iterations = 0;
  double grad_norm = 0.0;
  double loss = 0.0;
};

struct MsbtmRun {
  FlowCheckpointStore store;
  std::vector<TrainRecord> records;
};

using MsbtmObserver =
    std::function<void(long k, const Ensemble&, const ScoreNet&, const TrainRecord&)>;

inline std::vector<int> score_net_widths(const MeanFieldProblem& p, const TrainConfig& cfg) {
  std::vector<int> widths{p.dim};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(p.score_dim());
  return widths;
}

/// The full learned-score loop: fit s₀ to the analytic initial score, then
/// for k = 1..n_steps warm-start and train s_k on the current ensemble,
/// propagating with the score of the previous step in between.
inline MsbtmRun run_msbtm(const MeanFieldProblem& p, const Ensemble& initial,
                          const GaussianState& initial_density, const TrainConfig& cfg,
                          const FlowParams& fp, std::uint64_t seed,
                          const MsbtmObserver& observer = {}) {
  validate(p);
  if (auto v = violations(cfg); !v.empty()) throw ConfigError(std::move(v));
  if (initial.dim() != p.dim) throw DimensionError("run_msbtm: ensemble dimension mismatch");

  RngStream init_rng(seed, stream_id(streams::kNetInit));
  ScoreNet net = ScoreNet::glorot_uniform(score_net_widths(p, cfg), init_rng);
  FitResult fit = fit_initial_score(std::move(net), initial.states, initial_density, p.noisy_coords, cfg);
  net = std::move(fit.net);
  AdamState adam(net.param_count(), cfg.learning_rate);

  MsbtmRun run;
  auto provider = [&](long k, const Ensemble& e) -> std::shared_ptr<const ScoreModel> {
    TrainRecord rec{k, e.t, fit.iterations, 0.0, fit.loss};
    if (k > 0) {
      RngStream rng(seed, stream_id(streams::kTrainingProbes, static_cast<std::uint64_t>(k)));
      TrainStepResult r = train_step_score(net, adam, e.states, p.noisy_coords, cfg, k, rng);
      net = std::move(r.net);
      rec = {k, e.t, r.iterations, r.grad_norm, r.loss};
    }
    run.records.push_back(rec);
    if (observer) observer(k, e, net, rec);
    return std::make_shared<NetScore>(net, cfg.kappa, cfg.metrics_probes);
  };
  run.store = run_flow(p, initial, provider, fp);
  return run;
}

}  // namespace msbtm
