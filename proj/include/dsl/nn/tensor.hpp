#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dsl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatMap = Eigen::Map<Mat<T>>;

template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Storage for anything viewed through Eigen maps. Eigen's vectorised kernels
/// pick their loop split from the buffer address, so plain malloc alignment
/// would make results depend on heap history.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Configuration problems: wrong dimensions, invalid settings, bad files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace nn {

/// Dense NCHW tensor. Vectors are stored as N x C x 1 x 1.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t sample_size() const { return static_cast<std::size_t>(c()) * h() * w(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h()) * w(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  AlignedVector<T>& values() { return data_; }
  const AlignedVector<T>& values() const { return data_; }

  T* sample(int i) { return data_.data() + i * sample_size(); }
  const T* sample(int i) const { return data_.data() + i * sample_size(); }

  T& at(int i, int ch, int y, int x) {
    return data_[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  T at(int i, int ch, int y, int x) const {
    return data_[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// View as an (N, C*H*W) row-major matrix.
  MatMap<T> as_matrix() { return MatMap<T>(data_.data(), n(), static_cast<Eigen::Index>(sample_size())); }
  ConstMatMap<T> as_matrix() const {
    return ConstMatMap<T>(data_.data(), n(), static_cast<Eigen::Index>(sample_size()));
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  AlignedVector<T> data_;
};

inline std::string shape_string(const std::array<int, 4>& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]) + "x" +
         std::to_string(s[3]);
}

/// A named trainable array with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

}  // namespace nn
}  // namespace dsl
