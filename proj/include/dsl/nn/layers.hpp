#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsl/nn/tensor.hpp"

namespace dsl::nn {

/// Uniform(-bound, bound) with bound = sqrt(6 / fan_in); suited to ReLU stacks.
template <typename T, typename Rng>
void he_uniform(AlignedVector<T>& values, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : values) v = static_cast<T>(dist(rng));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the fan-in scheme used by affine heads.
template <typename T, typename Rng>
void fan_in_uniform(std::span<T> values, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : values) v = static_cast<T>(dist(rng));
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding)
      : in_(in_channels),
        out_(out_channels),
        kernel_(kernel),
        stride_(stride),
        padding_(padding),
        weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
        bias_(name + ".bias", {out_channels}) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || padding < 0) {
      throw ConfigError("conv2d " + name + ": invalid geometry");
    }
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int out_size(int in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

  template <typename Rng>
  void init(Rng& rng) {
    he_uniform(weight_.value, in_ * kernel_ * kernel_, rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    check_input(x);
    Mat<T> cols;
    im2col(x, cols);
    return apply(x, cols);
  }

  /// Training forward: keeps the unfolded input columns for backward().
  Tensor<T> forward(const Tensor<T>& x) {
    check_input(x);
    in_shape_ = x.shape();
    im2col(x, cols_);
    return apply(x, cols_);
  }

  /// Accumulates weight/bias gradients and returns the gradient w.r.t. the forward input.
  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t plane = dy.plane_size();
    const auto span = static_cast<Eigen::Index>(plane * dy.n());
    // Gather dy into (out, N*plane) to match the column layout.
    Mat<T> g(out_, span);
    for (int i = 0; i < dy.n(); ++i)
      for (int co = 0; co < out_; ++co)
        std::copy_n(dy.sample(i) + co * plane, plane, g.data() + co * span + i * plane);
    MatMap<T> dw(weight_.grad.data(), out_, patch());
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_.grad.data(), out_);
    dw.noalias() += g * cols_.transpose();
    db += g.rowwise().sum();
    const ConstMatMap<T> w(weight_.value.data(), out_, patch());
    const Mat<T> dcols = w.transpose() * g;
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    col2im(dcols, dy.h(), dy.w(), dx);
    return dx;
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }
  void collect(std::vector<Parameter<T>*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

 private:
  int patch() const { return in_ * kernel_ * kernel_; }

  void check_input(const Tensor<T>& x) const {
    if (x.c() != in_) {
      throw ConfigError(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " +
                        std::to_string(x.c()));
    }
  }

  /// Output columns [lo, hi) whose input column ox*stride - padding + kx lies inside [0, w).
  std::pair<int, int> valid_range(int kx, int w, int wo) const {
    int lo = 0;
    while (lo < wo && lo * stride_ - padding_ + kx < 0) ++lo;
    int hi = wo;
    while (hi > lo && (hi - 1) * stride_ - padding_ + kx >= w) --hi;
    return {lo, hi};
  }

  Tensor<T> apply(const Tensor<T>& x, const Mat<T>& cols) const {
    const int ho = out_size(x.h()), wo = out_size(x.w());
    const auto plane = static_cast<Eigen::Index>(ho) * wo;
    const ConstMatMap<T> w(weight_.value.data(), out_, patch());
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
    Tensor<T> y(x.n(), out_, ho, wo);
    // Per-sample blocks keep the working set in cache.
    for (int i = 0; i < x.n(); ++i) {
      MatMap<T> yi(y.sample(i), out_, plane);
      yi.noalias() = w * cols.middleCols(i * plane, plane);
      yi.colwise() += b;
    }
    return y;
  }

  /// Unfolds every sample into a (C*k*k, N*Ho*Wo) matrix; sample i owns columns
  /// [i*Ho*Wo, (i+1)*Ho*Wo).
  void im2col(const Tensor<T>& x, Mat<T>& cols) const {
    const int h = x.h(), w = x.w();
    const int ho = out_size(h), wo = out_size(w);
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    const std::size_t span = plane * x.n();
    cols.resize(patch(), static_cast<Eigen::Index>(span));
    for (int i = 0; i < x.n(); ++i) {
      const T* src = x.sample(i);
      for (int c = 0; c < in_; ++c) {
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            T* row = cols.data() + static_cast<std::size_t>((c * kernel_ + ky) * kernel_ + kx) * span + i * plane;
            const auto [lo, hi] = valid_range(kx, w, wo);
            const int shift = kx - padding_;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              T* dst = row + oy * wo;
              if (iy < 0 || iy >= h) {
                std::fill(dst, dst + wo, T(0));
                continue;
              }
              const T* line = src + (static_cast<std::size_t>(c) * h + iy) * w;
              std::fill(dst, dst + lo, T(0));
              if (stride_ == 1) {
                std::copy(line + lo + shift, line + hi + shift, dst + lo);
              } else {
                for (int ox = lo; ox < hi; ++ox) dst[ox] = line[ox * stride_ + shift];
              }
              std::fill(dst + hi, dst + wo, T(0));
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<T>& dcols, int ho, int wo, Tensor<T>& dx) const {
    const int h = dx.h(), w = dx.w();
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    const std::size_t span = plane * dx.n();
    for (int i = 0; i < dx.n(); ++i) {
      T* dst = dx.sample(i);
      for (int c = 0; c < in_; ++c) {
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            const T* row =
                dcols.data() + static_cast<std::size_t>((c * kernel_ + ky) * kernel_ + kx) * span + i * plane;
            const auto [lo, hi] = valid_range(kx, w, wo);
            const int shift = kx - padding_;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              if (iy < 0 || iy >= h) continue;
              T* line = dst + (static_cast<std::size_t>(c) * h + iy) * w;
              const T* r = row + oy * wo;
              for (int ox = lo; ox < hi; ++ox) line[ox * stride_ + shift] += r[ox];
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  Parameter<T> weight_, bias_;
  std::array<int, 4> in_shape_{};
  Mat<T> cols_;
};

/// y = x W^T + b over rows of an (N, in) matrix.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features)
      : in_(in_features),
        out_(out_features),
        weight_(name + ".weight", {out_features, in_features}),
        bias_(name + ".bias", {out_features}) {}

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  /// Redraws the given output rows (weights and bias) from the fan-in scheme.
  template <typename Rng>
  void init_rows(const std::vector<int>& rows, Rng& rng) {
    for (int r : rows) {
      fan_in_uniform(std::span<T>(weight_.value.data() + static_cast<std::size_t>(r) * in_, in_), in_, rng);
      fan_in_uniform(std::span<T>(bias_.value.data() + r, 1), in_, rng);
    }
  }

  template <typename Rng>
  void init(Rng& rng) {
    std::vector<int> rows(out_);
    for (int r = 0; r < out_; ++r) rows[r] = r;
    init_rows(rows, rng);
  }

  Mat<T> infer(const Mat<T>& x) const {
    if (x.cols() != in_) throw ConfigError(weight_.name + ": input width mismatch");
    const ConstMatMap<T> w(weight_.value.data(), out_, in_);
    const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias_.value.data(), out_);
    Mat<T> y = x * w.transpose();
    y.rowwise() += b;
    return y;
  }

  Mat<T> forward(const Mat<T>& x) {
    input_ = x;
    return infer(x);
  }

  Mat<T> backward(const Mat<T>& dy) {
    MatMap<T> dw(weight_.grad.data(), out_, in_);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bias_.grad.data(), out_);
    dw.noalias() += dy.transpose() * input_;
    db += dy.colwise().sum();
    const ConstMatMap<T> w(weight_.value.data(), out_, in_);
    return dy * w;
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }
  void collect(std::vector<Parameter<T>*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

 private:
  int in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  Mat<T> input_;
};

/// Per-channel batch normalization over (N, H, W). forward() normalizes with
/// batch statistics and updates the running estimates; infer() uses the running ones.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(name + ".gamma", {channels}),
        beta_(name + ".beta", {channels}),
        running_mean_(name + ".running_mean", {channels}),
        running_var_(name + ".running_var", {channels}) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
    std::fill(running_var_.value.begin(), running_var_.value.end(), T(1));
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    const std::size_t plane = x.plane_size();
    for (int c = 0; c < channels_; ++c) {
      const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_.value[c]) + eps_));
      const T scale = gamma_.value[c] * inv;
      const T shift = beta_.value[c] - running_mean_.value[c] * scale;
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.sample(i) + c * plane;
        T* dst = y.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] * scale + shift;
      }
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const std::size_t plane = x.plane_size();
    const double m = static_cast<double>(plane) * x.n();
    xhat_ = Tensor<T>(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(static_cast<std::size_t>(channels_), T(0));
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) sum += src[p];
      }
      const double mean = sum / m;
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) sq += (src[p] - mean) * (src[p] - mean);
      }
      const double var = sq / m;
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[c] = static_cast<T>(inv);
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.sample(i) + c * plane;
        T* xh = xhat_.sample(i) + c * plane;
        T* dst = y.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          xh[p] = static_cast<T>((src[p] - mean) * inv);
          dst[p] = gamma_.value[c] * xh[p] + beta_.value[c];
        }
      }
      const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
      running_mean_.value[c] = static_cast<T>((1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean);
      running_var_.value[c] = static_cast<T>((1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t plane = dy.plane_size();
    const double m = static_cast<double>(plane) * dy.n();
    Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
    for (int c = 0; c < channels_; ++c) {
      double db = 0.0, dg = 0.0;
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.sample(i) + c * plane;
        const T* xh = xhat_.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          db += g[p];
          dg += g[p] * xh[p];
        }
      }
      gamma_.grad[c] += static_cast<T>(dg);
      beta_.grad[c] += static_cast<T>(db);
      const double k = gamma_.value[c] * inv_std_[c] / m;
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.sample(i) + c * plane;
        const T* xh = xhat_.sample(i) + c * plane;
        T* out = dx.sample(i) + c * plane;
        for (std::size_t p = 0; p < plane; ++p) out[p] = static_cast<T>(k * (m * g[p] - db - xh[p] * dg));
      }
    }
    return dx;
  }

  void collect(std::vector<Parameter<T>*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }
  /// Running statistics: state that is saved but never optimized.
  void buffers(std::vector<Parameter<T>*>& out) { out.push_back(&running_mean_); out.push_back(&running_var_); }

 private:
  int channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU {
 public:
  static Tensor<T> infer(Tensor<T> x) {
    for (auto& v : x.values()) v = v > T(0) ? v : T(0);
    return x;
  }
  Tensor<T> forward(const Tensor<T>& x) {
    output_ = infer(x);
    return output_;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (output_.data()[i] <= T(0)) dy.data()[i] = T(0);
    }
    return dy;
  }

 private:
  Tensor<T> output_;
};

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
class Sigmoid {
 public:
  static Tensor<T> infer(Tensor<T> x) {
    for (auto& v : x.values()) v = sigmoid(v);
    return x;
  }
  Tensor<T> forward(const Tensor<T>& x) {
    output_ = infer(x);
    return output_;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T s = output_.data()[i];
      dy.data()[i] *= s * (T(1) - s);
    }
    return dy;
  }

 private:
  Tensor<T> output_;
};

/// 2x2 max pooling with stride 2. Odd trailing rows/cols are dropped.
template <typename T>
class MaxPool2 {
 public:
  static Tensor<T> infer(const Tensor<T>& x) {
    std::vector<std::size_t> unused;
    return run(x, unused);
  }
  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = x.shape();
    return run(x, argmax_);
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data()[argmax_[i]] += dy.data()[i];
    return dx;
  }

 private:
  static Tensor<T> run(const Tensor<T>& x, std::vector<std::size_t>& argmax) {
    const int ho = x.h() / 2, wo = x.w() / 2;
    Tensor<T> y(x.n(), x.c(), ho, wo);
    argmax.assign(y.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n(); ++i) {
      for (int c = 0; c < x.c(); ++c) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox, ++o) {
            std::size_t best = 0;
            T best_v = -std::numeric_limits<T>::infinity();
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t idx =
                    ((static_cast<std::size_t>(i) * x.c() + c) * x.h() + 2 * oy + dy) * x.w() + 2 * ox + dx;
                if (x.data()[idx] > best_v) {
                  best_v = x.data()[idx];
                  best = idx;
                }
              }
            }
            y.data()[o] = best_v;
            argmax[o] = best;
          }
        }
      }
    }
    return y;
  }

  std::array<int, 4> in_shape_{};
  std::vector<std::size_t> argmax_;
};

/// Nearest-neighbour 2x upsampling.
template <typename T>
struct Upsample2 {
  static Tensor<T> infer(const Tensor<T>& x) {
    Tensor<T> y(x.n(), x.c(), x.h() * 2, x.w() * 2);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int oy = 0; oy < y.h(); ++oy)
          for (int ox = 0; ox < y.w(); ++ox) y.at(i, c, oy, ox) = x.at(i, c, oy / 2, ox / 2);
    return y;
  }
  static Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
    for (int i = 0; i < dy.n(); ++i)
      for (int c = 0; c < dy.c(); ++c)
        for (int oy = 0; oy < dy.h(); ++oy)
          for (int ox = 0; ox < dy.w(); ++ox) dx.at(i, c, oy / 2, ox / 2) += dy.at(i, c, oy, ox);
    return dx;
  }
};

/// Channel concatenation of two tensors with matching N, H, W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ConfigError("concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
  Tensor<T> y(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), y.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(), y.sample(i) + a.sample_size());
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, int first) {
  Tensor<T> a(y.n(), first, y.h(), y.w()), b(y.n(), y.c() - first, y.h(), y.w());
  for (int i = 0; i < y.n(); ++i) {
    std::copy(y.sample(i), y.sample(i) + a.sample_size(), a.sample(i));
    std::copy(y.sample(i) + a.sample_size(), y.sample(i) + y.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

}  // namespace dsl::nn
