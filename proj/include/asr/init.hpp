#pragma once

// Parameter initialization. Draws always sample in double so the float and
// double instantiations of a model see identical sequences for one seed.

#include <cmath>
#include <random>

#include "asr/tensor.hpp"

namespace asr {

template <typename T>
void xavier_uniform(Tensor<T>& w, int64_t fan_in, int64_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  T* v = w.data();
  for (int64_t i = 0; i < w.numel(); ++i) v[i] = static_cast<T>(dist(rng));
}

template <typename T>
void normal_init(Tensor<T>& t, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  T* v = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<T>(dist(rng));
}

template <typename T>
void constant_init(Tensor<T>& t, T value) {
  T* v = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) v[i] = value;
}

inline double xavier_bound(int64_t fan_in, int64_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace asr
