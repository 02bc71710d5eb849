#pragma once

#include <concepts>
#include <span>
#include <vector>

#include "msbtm/error.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

namespace detail {

template <class F>
concept BatchScore = requires(const F& f, const Mat& x) {
  { f.forward_batch(x) } -> std::convertible_to<Mat>;
};

template <class F>
Mat eval_columns(const F& score, const Mat& x) {
  if constexpr (BatchScore<F>) {
    return score.forward_batch(x);
  } else {
    Vec first = score(Vec(x.col(0)));
    Mat out(first.size(), x.cols());
    out.col(0) = first;
    for (Eigen::Index j = 1; j < x.cols(); ++j) out.col(j) = score(Vec(x.col(j)));
    return out;
  }
}

}  // namespace detail

/// Antithetic denoising estimate of ∇·(W s) at x:
///   (1/M) Σ_m [s(x + κ W ξ_m) − s(x − κ W ξ_m)]·ξ_m / (2κ),  ξ_m ~ N(0, I).
/// Probes live in `noisy` coordinates (all coordinates when empty); the score
/// output is indexed by position within `noisy`. W defaults to the identity.
template <class F>
double denoising_divergence(const F& score, const Vec& x, double kappa, int probes, RngStream& rng,
                            std::span<const int> noisy = {}, const Mat* weight = nullptr) {
  if (!(kappa > 0.0)) throw Error("denoising_divergence: kappa must be > 0");
  if (probes < 1) throw Error("denoising_divergence: need at least one probe");
  std::vector<int> all;
  if (noisy.empty()) {
    all.resize(static_cast<std::size_t>(x.size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    noisy = all;
  }
  const auto k = static_cast<Eigen::Index>(noisy.size());
  if (weight && (weight->rows() != k || weight->cols() != k)) {
    throw DimensionError("denoising_divergence: weight must match the noisy block");
  }
  Mat xi(k, probes);
  for (int m = 0; m < probes; ++m) xi.col(m) = rng.normal_vec(k);
  const Mat eta = weight ? Mat(*weight * xi) : xi;

  Mat shifted(x.size(), 2 * Eigen::Index{probes});
  for (int m = 0; m < probes; ++m) {
    Vec plus = x;
    Vec minus = x;
    for (Eigen::Index a = 0; a < k; ++a) {
      plus(noisy[a]) += kappa * eta(a, m);
      minus(noisy[a]) -= kappa * eta(a, m);
    }
    shifted.col(m) = plus;
    shifted.col(probes + m) = minus;
  }
  const Mat s = detail::eval_columns(score, shifted);
  if (s.rows() != k) {
    throw DimensionError("denoising_divergence: score output size differs from the noisy block");
  }
  double acc = 0.0;
  for (int m = 0; m < probes; ++m) acc += (s.col(m) - s.col(probes + m)).dot(xi.col(m));
  return acc / (2.0 * kappa * probes);
}

}  // namespace msbtm
