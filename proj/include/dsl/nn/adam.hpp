#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dsl/nn/tensor.hpp"

namespace dsl::nn {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed, ordered parameter list. Moments are kept per element.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter<T>*> params, AdamOptions options)
      : params_(std::move(params)), options_(options) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++step_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    const T lr = static_cast<T>(options_.lr * std::sqrt(c2) / c1);
    const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
    const T eps = static_cast<T>(options_.eps * std::sqrt(c2));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T g = p.grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        p.value[i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
  }

  /// Clears moments for elements [begin, begin + count) of the named parameter.
  void reset_moments(const Parameter<T>& param, std::size_t begin, std::size_t count) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (params_[k] != &param) continue;
      std::fill(m_[k].begin() + begin, m_[k].begin() + begin + count, T(0));
      std::fill(v_[k].begin() + begin, v_[k].begin() + begin + count, T(0));
      return;
    }
    throw std::invalid_argument("adam: unknown parameter " + param.name);
  }

  const std::vector<Parameter<T>*>& params() const { return params_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace dsl::nn
