#pragma once

// Central finite-difference verification of analytic gradients. The loss
// callback rebuilds the forward graph on every call; the harness never
// inspects how the loss was produced, so it stays independent of the
// backward rules it checks.

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "asr/tape.hpp"
#include "asr/tensor.hpp"

namespace asr {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;

  void merge(const GradCheckResult& o) {
    max_rel_err = std::max(max_rel_err, o.max_rel_err);
    checked += o.checked;
  }
};

// rel err with a floor on the denominator: tiny gradients are compared
// absolutely at floor scale instead of amplifying finite-difference noise.
inline double rel_err(double a, double b, double floor_scale = 1e-4) {
  const double denom = std::max({std::fabs(a), std::fabs(b), floor_scale});
  return std::fabs(a - b) / denom;
}

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& loss_fn,
                           const std::vector<Tensor<T>>& params, double h = 1e-5,
                           int64_t max_per_param = -1,
                           std::mt19937_64* rng = nullptr,
                           double denom_floor = 1e-4) {
  for (const auto& p : params) {
    p.set_requires_grad(true);
    p.drop_grad();
    p.ensure_grad();
  }
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> loss = loss_fn();
    tape.backward(loss);
  }

  GradCheckResult result;
  for (Tensor<T> p : params) {  // copy of the handle, shared payload
    std::vector<int64_t> indices;
    const int64_t n = p.numel();
    if (max_per_param < 0 || n <= max_per_param) {
      indices.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) indices[static_cast<size_t>(i)] = i;
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      std::shuffle(all.begin(), all.end(), *rng);
      indices.assign(all.begin(), all.begin() + max_per_param);
    }
    for (int64_t idx : indices) {
      T* data = p.data();
      const T saved = data[idx];
      data[idx] = saved + static_cast<T>(h);
      const double lp = static_cast<double>(loss_fn().item());
      data[idx] = saved - static_cast<T>(h);
      const double lm = static_cast<double>(loss_fn().item());
      data[idx] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double analytic = static_cast<double>(p.grad()[idx]);
      result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic, fd, denom_floor));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace asr
