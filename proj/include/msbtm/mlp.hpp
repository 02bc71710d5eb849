#pragma once

// Feed-forward score network: swish on hidden layers, affine output layer,
// hand-written backpropagation and an Adam optimizer.
//
// Parameters live in one flat vector, layer by layer: W_l (out x in,
// column-major) followed by b_l.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "msbtm/error.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double swish(double z) { return z * sigmoid(z); }
inline double swish_derivative(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

/// Intermediate values of a batched forward pass, kept for backward.
struct ForwardCache {
  std::vector<Mat> pre;   // pre-activations per layer
  std::vector<Mat> post;  // post[0] = input, post[l + 1] = output of layer l
};

struct Gradients {
  Vec params;
  Vec input;
};

struct BatchGradients {
  Vec params;  // summed over the batch
  Mat input;   // one column per sample
};

class ScoreNet {
 public:
  ScoreNet() = default;

  /// Zero-initialised network with the given layer widths (input first).
  explicit ScoreNet(std::vector<int> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw DimensionError("ScoreNet: need at least input and output widths");
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      if (widths_[l] < 1 || widths_[l + 1] < 1) throw DimensionError("ScoreNet: widths must be >= 1");
      offsets_.push_back(offset);
      offset += Eigen::Index{widths_[l + 1]} * widths_[l] + widths_[l + 1];
    }
    params_ = Vec::Zero(offset);
  }

  /// Symmetric uniform fan-based initialisation, zero biases.
  static ScoreNet glorot_uniform(std::vector<int> widths, RngStream& rng) {
    ScoreNet net(std::move(widths));
    for (int l = 0; l < net.num_layers(); ++l) {
      const int fan_in = net.widths_[l];
      const int fan_out = net.widths_[l + 1];
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      auto w = net.weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = limit * (2.0 * rng.uniform() - 1.0);
      }
    }
    return net;
  }

  const std::vector<int>& widths() const noexcept { return widths_; }
  int num_layers() const noexcept { return static_cast<int>(offsets_.size()); }
  int input_dim() const noexcept { return widths_.empty() ? 0 : widths_.front(); }
  int output_dim() const noexcept { return widths_.empty() ? 0 : widths_.back(); }
  Eigen::Index param_count() const noexcept { return params_.size(); }

  const Vec& params() const noexcept { return params_; }
  Vec& params() noexcept { return params_; }

  Eigen::Map<Mat> weight(int l) {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<const Mat> weight(int l) const {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<Vec> bias(int l) {
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l], widths_[l + 1]};
  }
  Eigen::Map<const Vec> bias(int l) const {
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l], widths_[l + 1]};
  }

  Vec forward(const Vec& x) const {
    if (x.size() != input_dim()) {
      throw DimensionError("ScoreNet::forward: input has " + std::to_string(x.size()) +
                           " entries, expected " + std::to_string(input_dim()));
    }
    return forward_batch(Mat(x));
  }

  Mat forward_batch(const Mat& x) const {
    check_batch(x);
    Mat a = x;
    for (int l = 0; l < num_layers(); ++l) {
      Mat z = weight(l) * a;
      z.colwise() += bias(l);
      if (l + 1 < num_layers()) z = z.unaryExpr([](double v) { return swish(v); });
      a = std::move(z);
    }
    return a;
  }

  Mat forward_batch(const Mat& x, ForwardCache& cache) const {
    check_batch(x);
    cache.pre.resize(num_layers());
    cache.post.resize(num_layers() + 1);
    cache.post[0] = x;
    for (int l = 0; l < num_layers(); ++l) {
      Mat& z = cache.pre[l];
      z.noalias() = weight(l) * cache.post[l];
      z.colwise() += bias(l);
      if (l + 1 < num_layers()) {
        cache.post[l + 1] = z.unaryExpr([](double v) { return swish(v); });
      } else {
        cache.post[l + 1] = z;
      }
    }
    return cache.post.back();
  }

  /// Gradients of Σ_cols upstream·output with respect to the parameters
  /// (summed over columns) and to each input column.
  BatchGradients backward_batch(const ForwardCache& cache, const Mat& upstream) const {
    if (upstream.rows() != output_dim() || cache.post.empty() ||
        upstream.cols() != cache.post[0].cols()) {
      throw DimensionError("ScoreNet::backward: upstream shape does not match the forward batch");
    }
    BatchGradients out{Vec::Zero(param_count()), Mat()};
    Mat g = upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
      if (l + 1 < num_layers()) {
        g.array() *= cache.pre[l].unaryExpr([](double v) { return swish_derivative(v); }).array();
      }
      Eigen::Map<Mat> dw(out.params.data() + offsets_[l], widths_[l + 1], widths_[l]);
      dw.noalias() = g * cache.post[l].transpose();
      Eigen::Map<Vec> db(out.params.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l],
                         widths_[l + 1]);
      db = g.rowwise().sum();
      Mat next = weight(l).transpose() * g;
      g = std::move(next);
    }
    out.input = std::move(g);
    return out;
  }

  Gradients backward(const Vec& x, const Vec& upstream) const {
    if (x.size() != input_dim()) throw DimensionError("ScoreNet::backward: input size mismatch");
    if (upstream.size() != output_dim()) throw DimensionError("ScoreNet::backward: upstream size mismatch");
    ForwardCache cache;
    forward_batch(Mat(x), cache);
    BatchGradients g = backward_batch(cache, Mat(upstream));
    return {std::move(g.params), Vec(g.input.col(0))};
  }

  friend bool operator==(const ScoreNet& a, const ScoreNet& b) {
    if (a.widths_ != b.widths_ || a.params_.size() != b.params_.size()) return false;
    return std::memcmp(a.params_.data(), b.params_.data(),
                       sizeof(double) * static_cast<std::size_t>(a.params_.size())) == 0;
  }

 private:
  void check_batch(const Mat& x) const {
    if (x.rows() != input_dim()) {
      throw DimensionError("ScoreNet: batch has " + std::to_string(x.rows()) + " rows, expected " +
                           std::to_string(input_dim()));
    }
  }

  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Vec params_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  Vec first_moment;
  Vec second_moment;

  AdamState() = default;
  AdamState(Eigen::Index n, double lr)
      : learning_rate(lr), first_moment(Vec::Zero(n)), second_moment(Vec::Zero(n)) {}
};

inline void adam_step(AdamState& state, Vec& params, const Vec& grads) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment shapes differ");
  }
  if (!grads.allFinite()) throw NonFiniteError("adam_step: non-finite gradient (training diverged)");
  ++state.step;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.array().square().matrix();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary layout (little-endian):
//   char[8] "MSBTMNET" | u32 version | u32 n_widths | u32 widths[n_widths]
//   | u64 n_params | f64 params[n_params]

inline constexpr char kNetMagic[8] = {'M', 'S', 'B', 'T', 'M', 'N', 'E', 'T'};
inline constexpr std::uint32_t kNetFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("checkpoint: unexpected end of stream");
  return v;
}

}  // namespace detail

inline void write_net(std::ostream& os, const ScoreNet& net) {
  os.write(kNetMagic, sizeof(kNetMagic));
  detail::write_pod(os, kNetFormatVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(net.widths().size()));
  for (int w : net.widths()) detail::write_pod(os, static_cast<std::uint32_t>(w));
  detail::write_pod(os, static_cast<std::uint64_t>(net.param_count()));
  os.write(reinterpret_cast<const char*>(net.params().data()),
           static_cast<std::streamsize>(sizeof(double) * net.param_count()));
  if (!os) throw Error("checkpoint: write failed");
}

inline ScoreNet read_net(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kNetMagic, sizeof(magic)) != 0) throw Error("checkpoint: bad magic");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kNetFormatVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto n_widths = detail::read_pod<std::uint32_t>(is);
  if (n_widths < 2 || n_widths > 64) throw Error("checkpoint: implausible layer count");
  std::vector<int> widths(n_widths);
  for (auto& w : widths) w = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  ScoreNet net(std::move(widths));
  const auto n_params = detail::read_pod<std::uint64_t>(is);
  if (n_params != static_cast<std::uint64_t>(net.param_count())) {
    throw Error("checkpoint: parameter count does not match layer widths");
  }
  is.read(reinterpret_cast<char*>(net.params().data()),
          static_cast<std::streamsize>(sizeof(double) * n_params));
  if (!is) throw Error("checkpoint: truncated parameter block");
  return net;
}

inline void save_net(const std::filesystem::path& path, const ScoreNet& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  write_net(os, net);
}

inline ScoreNet load_net(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path.string());
  return read_net(is);
}

}  // namespace msbtm
