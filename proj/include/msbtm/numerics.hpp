#pragma once

// Dense small-dimension algebra and counter-based random streams.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

#include "msbtm/error.hpp"

namespace msbtm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline bool all_finite(const Vec& v) { return v.allFinite(); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_square(const Mat& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(what) + ": expected a square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

inline void require_symmetric(const Mat& m, const char* what, double tol = 1e-12) {
  require_square(m, what);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
      const double scale = std::max({1.0, std::abs(m(i, j)), std::abs(m(j, i))});
      if (std::abs(m(i, j) - m(j, i)) > tol * scale) {
        throw Error(std::string(what) + ": matrix is not symmetric at (" + std::to_string(i) +
                    "," + std::to_string(j) + ")");
      }
    }
  }
}

/// Lower-triangular Cholesky factor L with m = L Lᵀ. Throws NotSpdError
/// naming the first non-positive pivot.
inline Mat cholesky_lower(const Mat& m) {
  require_symmetric(m, "cholesky");
  const Eigen::Index n = m.rows();
  Mat l = Mat::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double diag = m(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw NotSpdError(static_cast<std::size_t>(j), diag);
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

struct InverseDet {
  Mat inverse;
  double det;
};

/// Inverse and determinant of an SPD matrix via its Cholesky factor.
inline InverseDet spd_inverse_det(const Mat& m) {
  const Mat l = cholesky_lower(m);
  const Eigen::Index n = m.rows();
  double det = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) det *= l(i, i) * l(i, i);
  // Solve L Y = I, then Lᵀ X = Y.
  const auto tri = l.triangularView<Eigen::Lower>();
  Mat y = tri.solve(Mat::Identity(n, n));
  Mat inv = l.transpose().triangularView<Eigen::Upper>().solve(y);
  inv = 0.5 * (inv + inv.transpose());
  return {std::move(inv), det};
}

// ---------------------------------------------------------------------------
// Random streams

namespace detail {

inline constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
inline constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
inline constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

}  // namespace detail

using PhiloxBlock = std::array<std::uint32_t, 4>;

/// Philox4x32-10 block function.
constexpr PhiloxBlock philox4x32(PhiloxBlock ctr, std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += detail::kPhiloxW0;
      key[1] += detail::kPhiloxW1;
    }
    const std::uint64_t p0 = std::uint64_t{detail::kPhiloxM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{detail::kPhiloxM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Derives a stream id from a purpose tag and up to two indices.
constexpr std::uint64_t stream_id(std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(tag) ^ a) ^ b);
}

// Purpose tags for stream_id.
namespace streams {
inline constexpr std::uint64_t kInitialSamples = 1;
inline constexpr std::uint64_t kSdeNoise = 2;
inline constexpr std::uint64_t kTrainingProbes = 3;
inline constexpr std::uint64_t kNetInit = 4;
inline constexpr std::uint64_t kMetricsProbes = 5;
inline constexpr std::uint64_t kDensityProbes = 6;
}  // namespace streams

/// Counter-based stream keyed by (seed, stream). The counter advances by one
/// block per draw, so any draw is addressable by (seed, stream, counter).
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  PhiloxBlock next_block() {
    const PhiloxBlock ctr = {static_cast<std::uint32_t>(counter_),
                             static_cast<std::uint32_t>(counter_ >> 32),
                             static_cast<std::uint32_t>(stream_),
                             static_cast<std::uint32_t>(stream_ >> 32)};
    ++counter_;
    return philox4x32(ctr, {static_cast<std::uint32_t>(seed_),
                            static_cast<std::uint32_t>(seed_ >> 32)});
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    const PhiloxBlock b = next_block();
    return to_open_unit(join(b[0], b[1]));
  }

  /// Standard normal via Box–Muller; one block per draw.
  double normal() {
    const PhiloxBlock b = next_block();
    const double u1 = to_open_unit(join(b[0], b[1]));
    const double u2 = to_open_unit(join(b[2], b[3]));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Vec normal_vec(Eigen::Index n) {
    Vec z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = normal();
    return z;
  }

 private:
  static constexpr std::uint64_t join(std::uint32_t lo, std::uint32_t hi) {
    return (std::uint64_t{hi} << 32) | lo;
  }
  static double to_open_unit(std::uint64_t x) {
    return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

/// Draws mean + L z, L the Cholesky factor of cov.
inline Vec gaussian_sample(const Vec& mean, const Mat& cov, RngStream& rng) {
  if (cov.rows() != mean.size()) throw DimensionError("gaussian_sample: mean/cov size mismatch");
  const Mat l = cholesky_lower(cov);
  return mean + l * rng.normal_vec(mean.size());
}

/// Column-per-sample draws; sample i uses its own stream so the set is
/// independent of draw order.
inline Mat gaussian_samples(const Vec& mean, const Mat& cov, Eigen::Index n, std::uint64_t seed,
                            std::uint64_t tag = streams::kInitialSamples) {
  if (cov.rows() != mean.size()) throw DimensionError("gaussian_samples: mean/cov size mismatch");
  const Mat l = cholesky_lower(cov);
  Mat out(mean.size(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    RngStream rng(seed, stream_id(tag, static_cast<std::uint64_t>(i)));
    out.col(i) = mean + l * rng.normal_vec(mean.size());
  }
  return out;
}

}  // namespace msbtm
