#pragma once

// Type-erased score fields used by the integrators and the flow store.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "msbtm/denoising.hpp"
#include "msbtm/error.hpp"
#include "msbtm/mlp.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

/// A score field s: R^d -> R^k over the k noisy coordinates.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;

  /// One output column per input column.
  virtual Mat evaluate(const Mat& x) const = 0;

  /// ∇·(W s) at x, derivatives taken along `noisy`; W is k x k.
  virtual double weighted_divergence(const Vec& x, std::span<const int> noisy, const Mat& weight,
                                     RngStream& rng) const = 0;

  Vec operator()(const Vec& x) const { return evaluate(Mat(x)).col(0); }
};

/// A trained network; divergence by the denoising estimator.
class NetScore final : public ScoreModel {
 public:
  NetScore(ScoreNet net, double kappa, int probes)
      : net_(std::move(net)), kappa_(kappa), probes_(probes) {}

  const ScoreNet& net() const noexcept { return net_; }

  int input_dim() const override { return net_.input_dim(); }
  int output_dim() const override { return net_.output_dim(); }
  Mat evaluate(const Mat& x) const override { return net_.forward_batch(x); }
  double weighted_divergence(const Vec& x, std::span<const int> noisy, const Mat& weight,
                             RngStream& rng) const override {
    return denoising_divergence(net_, x, kappa_, probes_, rng, noisy, &weight);
  }

 private:
  ScoreNet net_;
  double kappa_;
  int probes_;
};

/// Score given by callables; the divergence callable returns ∇·s along the
/// noisy coordinates and is scaled by W assuming W is a multiple of I.
class FunctionScore final : public ScoreModel {
 public:
  using Field = std::function<Vec(const Vec&)>;
  using Divergence = std::function<double(const Vec&)>;

  FunctionScore(int input_dim, int output_dim, Field field, Divergence divergence)
      : in_(input_dim), out_(output_dim), field_(std::move(field)), div_(std::move(divergence)) {}

  int input_dim() const override { return in_; }
  int output_dim() const override { return out_; }
  Mat evaluate(const Mat& x) const override {
    Mat out(out_, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = field_(Vec(x.col(j)));
    return out;
  }
  double weighted_divergence(const Vec& x, std::span<const int>, const Mat& weight,
                             RngStream&) const override {
    const Mat iso = weight(0, 0) * Mat::Identity(weight.rows(), weight.cols());
    if ((weight - iso).cwiseAbs().maxCoeff() > 0.0) {
      throw Error("FunctionScore: divergence weight must be a multiple of the identity");
    }
    return weight(0, 0) * div_(x);
  }

 private:
  int in_;
  int out_;
  Field field_;
  Divergence div_;
};

}  // namespace msbtm
