#pragma once

// Adam with bias correction. One state entry per tracked parameter tensor.

#include <cmath>
#include <cstdint>
#include <vector>

#include "asr/common.hpp"
#include "asr/tensor.hpp"

namespace asr {

template <typename T>
struct AdamConfig {
  T lr = T{0.001};
  T beta1 = T{0.9};
  T beta2 = T{0.999};
  T eps = T{1e-8};
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig<T> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i].numel()), T{0});
      v_[i].assign(static_cast<size_t>(params_[i].numel()), T{0});
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.ensure_grad();
      p.zero_grad();
    }
  }

  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const T bc1 = T{1} - std::pow(cfg_.beta1, static_cast<T>(t_));
    const T bc2 = T{1} - std::pow(cfg_.beta2, static_cast<T>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.has_grad()) {
        throw ContractError(str_format("adam: parameter %zu has no gradient", i));
      }
      const T* g = p.grad();
      T* w = p.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const int64_t n = p.numel();
      for (int64_t k = 0; k < n; ++k) {
        m[k] = cfg_.beta1 * m[k] + (T{1} - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (T{1} - cfg_.beta2) * g[k] * g[k];
        const T mhat = m[k] / bc1;
        const T vhat = v[k] / bc2;
        w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig<T> cfg_;
  int64_t t_ = 0;
};

}  // namespace asr
