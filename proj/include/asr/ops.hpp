#pragma once

// Differentiable operations over Tensor<T>. Each op computes its output
// eagerly and, when a tape is installed and an input is tracked, records
// one backward rule. Heavy loops parallelize over disjoint output (or
// per-image) ranges with static schedules so results do not depend on
// scheduling; reductions accumulate in double.

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "asr/common.hpp"
#include "asr/gemm.hpp"
#include "asr/tape.hpp"
#include "asr/tensor.hpp"

namespace asr {

namespace detail {

constexpr int64_t kParMin = 1 << 14;  // below this, parallel fork costs more than it saves

template <typename T>
bool track(const Tensor<T>& a) {
  return Tape<T>::recording() && a.requires_grad();
}
template <typename T, typename... Rest>
bool track(const Tensor<T>& a, const Rest&... rest) {
  return Tape<T>::recording() && (a.requires_grad() || (rest.requires_grad() || ...));
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(str_format("%s: shape %s vs %s", op,
                                    shape_str(a.shape()).c_str(),
                                    shape_str(b.shape()).c_str()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* av = a.data();
  const T* bv = b.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];
  if (detail::track(a, b)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([a, b, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      if (a.requires_grad()) {
        T* ga = a.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* av = a.data();
  const T* bv = b.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = av[i] - bv[i];
  if (detail::track(a, b)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([a, b, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      if (a.requires_grad()) {
        T* ga = a.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* av = a.data();
  const T* bv = b.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i];
  if (detail::track(a, b)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([a, b, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* av2 = a.data();
      const T* bv2 = b.data();
      if (a.requires_grad()) {
        T* ga = a.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av2[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] * c;
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, c, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * c;
    });
  }
  return y;
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& x, T c) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] + c;
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return y;
}

// y = x^p with scalar exponent. For p < 1 the derivative blows up toward
// x = 0; the backward clamps the base at a tiny floor so a saturated-zero
// input cannot inject Inf into the graph.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = std::pow(xv[i], p);
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, p, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* xv2 = x.data();
      T* gx = x.grad();
      const bool clamp = p < T{1};
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) {
        T base = xv2[i];
        if (clamp && base < T{1e-30}) base = T{1e-30};
        gx[i] += g[i] * p * std::pow(base, p - T{1});
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] > T{0} ? xv[i] : T{0};
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* xv2 = x.data();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) {
        if (xv2[i] > T{0}) gx[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) {
    yv[i] = xv[i] > T{0} ? xv[i] : std::expm1(xv[i]);
  }
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* xv2 = x.data();
      const T* yv2 = y.data();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) {
        gx[i] += g[i] * (xv2[i] > T{0} ? T{1} : yv2[i] + T{1});
      }
    });
  }
  return y;
}

template <typename T>
T sigmoid_val(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
  for (int64_t i = 0; i < n; ++i) yv[i] = sigmoid_val(xv[i]);
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* yv2 = y.data();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * yv2[i] * (T{1} - yv2[i]);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const int64_t n = x.numel();
  const T* xv = x.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(xv[i]);
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc));
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const int64_t n = x.numel();
  const T* xv = x.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(xv[i]);
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] / static_cast<T>(n);
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (n > detail::kParMin)
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape_copy(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError(str_format("reshape: %s has %lld elements, target %s",
                                    shape_str(x.shape()).c_str(),
                                    static_cast<long long>(x.numel()),
                                    shape_str(new_shape).c_str()));
  }
  Tensor<T> y = Tensor<T>::from_vec(std::move(new_shape), x.vec());
  if (detail::track(x)) {
    y.set_requires_grad(true);
    const int64_t n = x.numel();
    Tape<T>::current()->record([x, y, n]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return y;
}

// Interior crop of the two trailing spatial dims; leading dims pass through.
template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, int64_t top, int64_t left, int64_t oh, int64_t ow) {
  if (x.ndim() < 2) throw DimensionError("crop_hw: tensor must have spatial dims");
  const int64_t H = x.dim(x.ndim() - 2);
  const int64_t W = x.dim(x.ndim() - 1);
  if (top < 0 || left < 0 || top + oh > H || left + ow > W || oh <= 0 || ow <= 0) {
    throw ConfigError(str_format("crop_hw: window %lldx%lld at (%lld,%lld) outside %lldx%lld",
                                 static_cast<long long>(oh), static_cast<long long>(ow),
                                 static_cast<long long>(top), static_cast<long long>(left),
                                 static_cast<long long>(H), static_cast<long long>(W)));
  }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor<T> y = Tensor<T>::zeros(out_shape);
  const int64_t lead = x.numel() / (H * W);
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (lead * oh * ow > detail::kParMin)
  for (int64_t l = 0; l < lead; ++l) {
    for (int64_t r = 0; r < oh; ++r) {
      const T* src = xv + (l * H + top + r) * W + left;
      T* dst = yv + (l * oh + r) * ow;
      std::copy(src, src + ow, dst);
    }
  }
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, lead, H, W, top, left, oh, ow]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) if (lead * oh * ow > detail::kParMin)
      for (int64_t l = 0; l < lead; ++l) {
        for (int64_t r = 0; r < oh; ++r) {
          const T* gs = g + (l * oh + r) * ow;
          T* gd = gx + (l * H + top + r) * W + left;
          for (int64_t c = 0; c < ow; ++c) gd[c] += gs[c];
        }
      }
    });
  }
  return y;
}

// x[N,C,H,W] -> x[N, c0:c0+count, H, W]
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t count) {
  if (x.ndim() != 4) throw DimensionError("slice_channels: expected NCHW tensor");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c0 + count > C) throw DimensionError("slice_channels: channel range out of bounds");
  Tensor<T> y = Tensor<T>::zeros({N, count, H, W});
  const int64_t hw = H * W;
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy(xv + (n * C + c0) * hw, xv + (n * C + c0 + count) * hw, yv + n * count * hw);
  }
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, N, C, c0, count, hw]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
      for (int64_t n = 0; n < N; ++n) {
        const T* gs = g + n * count * hw;
        T* gd = gx + (n * C + c0) * hw;
        for (int64_t i = 0; i < count * hw; ++i) gd[i] += gs[i];
      }
    });
  }
  return y;
}

// s[N,C] -> y[N,C,H,W] with y[n,c,:,:] = s[n,c]
template <typename T>
Tensor<T> expand_nc(const Tensor<T>& s, int64_t H, int64_t W) {
  if (s.ndim() != 2) throw DimensionError("expand_nc: expected [N,C] tensor");
  const int64_t N = s.dim(0), C = s.dim(1), hw = H * W;
  Tensor<T> y = Tensor<T>::zeros({N, C, H, W});
  const T* sv = s.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) if (N * C * hw > detail::kParMin)
  for (int64_t i = 0; i < N * C; ++i) {
    std::fill(yv + i * hw, yv + (i + 1) * hw, sv[i]);
  }
  if (detail::track(s)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([s, y, N, C, hw]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gs = s.grad();
#pragma omp parallel for schedule(static) if (N * C * hw > detail::kParMin)
      for (int64_t i = 0; i < N * C; ++i) {
        double acc = 0.0;
        const T* gp = g + i * hw;
        for (int64_t k = 0; k < hw; ++k) acc += static_cast<double>(gp[k]);
        gs[i] += static_cast<T>(acc);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense (batched affine)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 2) throw DimensionError("dense: input must be [N,K]");
  if (w.ndim() != 2) throw DimensionError("dense: weight must be [K,M]");
  const int64_t N = x.dim(0), K = x.dim(1), M = w.dim(1);
  if (w.dim(0) != K) {
    throw DimensionError(str_format("dense: input features (axis 1) = %lld vs weight rows = %lld",
                                    static_cast<long long>(K), static_cast<long long>(w.dim(0))));
  }
  if (b.numel() != M) throw DimensionError("dense: bias length must match output features");
  Tensor<T> y = Tensor<T>::zeros({N, M});
  gemm_rm(false, false, static_cast<int>(N), static_cast<int>(M), static_cast<int>(K),
          T{1}, x.data(), static_cast<int>(K), w.data(), static_cast<int>(M), T{0},
          y.data(), static_cast<int>(M));
  T* yv = y.data();
  const T* bv = b.data();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t m = 0; m < M; ++m) yv[n * M + m] += bv[m];
  }
  if (detail::track(x, w, b)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, w, b, y, N, K, M]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      if (x.requires_grad()) {
        gemm_rm(false, true, static_cast<int>(N), static_cast<int>(K), static_cast<int>(M),
                T{1}, g, static_cast<int>(M), w.data(), static_cast<int>(M), T{1},
                x.grad(), static_cast<int>(K));
      }
      if (w.requires_grad()) {
        gemm_rm(true, false, static_cast<int>(K), static_cast<int>(M), static_cast<int>(N),
                T{1}, x.data(), static_cast<int>(K), g, static_cast<int>(M), T{1},
                w.grad(), static_cast<int>(M));
      }
      if (b.requires_grad()) {
        T* gb = b.grad();
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t m = 0; m < M; ++m) gb[m] += g[n * M + m];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int oh, int ow, T* col) {
  const int ohw = oh * ow;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* dst = col + ((c * kh + i) * kw + j) * ohw;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride + i - pad;
          T* drow = dst + y * ow;
          if (iy < 0 || iy >= H) {
            std::fill(drow, drow + ow, T{0});
            continue;
          }
          const T* src = x + (c * H + iy) * W;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride + j - pad;
            drow[xo] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int oh, int ow, T* x_grad) {
  const int ohw = oh * ow;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* src = col + ((c * kh + i) * kw + j) * ohw;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride + i - pad;
          if (iy < 0 || iy >= H) continue;
          T* drow = x_grad + (c * H + iy) * W;
          const T* srow = src + y * ow;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride + j - pad;
            if (ix >= 0 && ix < W) drow[ix] += srow[xo];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int padding) {
  if (x.ndim() != 4) throw DimensionError("conv2d: input must be [N,C,H,W]");
  if (w.ndim() != 4) throw DimensionError("conv2d: weight must be [F,C,kh,kw]");
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  const int F = static_cast<int>(w.dim(0)), kh = static_cast<int>(w.dim(2));
  const int kw = static_cast<int>(w.dim(3));
  if (w.dim(1) != C) {
    throw DimensionError(str_format(
        "conv2d: input channels (axis 1) = %d but weight expects %d", C,
        static_cast<int>(w.dim(1))));
  }
  if (b.numel() != F) {
    throw DimensionError(str_format("conv2d: bias length %lld != output channels (axis 0) %d",
                                    static_cast<long long>(b.numel()), F));
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw DimensionError(str_format("conv2d: kernel %dx%d larger than padded input %dx%d",
                                    kh, kw, H + 2 * padding, W + 2 * padding));
  }
  const int oh = (H + 2 * padding - kh) / stride + 1;
  const int ow = (W + 2 * padding - kw) / stride + 1;
  const int ckk = C * kh * kw;
  const int ohw = oh * ow;

  Tensor<T> y = Tensor<T>::zeros({N, F, oh, ow});
  const int nth = omp_get_max_threads();
  {
    std::vector<std::vector<T>> cols(nth);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
      std::vector<T>& col = cols[omp_get_thread_num()];
      if (col.empty()) col.resize(static_cast<size_t>(ckk) * ohw);
      detail::im2col(x.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw,
                     stride, padding, oh, ow, col.data());
      T* yn = y.data() + static_cast<int64_t>(n) * F * ohw;
      gemm_rm(false, false, F, ohw, ckk, T{1}, w.data(), ckk, col.data(), ohw, T{0}, yn, ohw);
      const T* bv = b.data();
      for (int f = 0; f < F; ++f) {
        T* row = yn + static_cast<int64_t>(f) * ohw;
        for (int i = 0; i < ohw; ++i) row[i] += bv[f];
      }
    }
  }

  if (detail::track(x, w, b)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, w, b, y, N, C, H, W, F, kh, kw, stride, padding, oh,
                                ow, ckk, ohw]() {
      if (!y.has_grad()) return;
      const T* gy = y.grad();
      const int nth2 = omp_get_max_threads();

      if (x.requires_grad()) {
        T* gx = x.grad();  // allocate before the parallel region
        std::vector<std::vector<T>> dcols(nth2);
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
          std::vector<T>& dcol = dcols[omp_get_thread_num()];
          if (dcol.empty()) dcol.resize(static_cast<size_t>(ckk) * ohw);
          const T* gyn = gy + static_cast<int64_t>(n) * F * ohw;
          gemm_rm(true, false, ckk, ohw, F, T{1}, w.data(), ckk, gyn, ohw, T{0},
                  dcol.data(), ohw);
          detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, padding, oh, ow,
                             gx + static_cast<int64_t>(n) * C * H * W);
        }
      }

      if (w.requires_grad() || b.requires_grad()) {
        // Per-thread partials combined in fixed order keep accumulation
        // deterministic for a given thread count.
        std::vector<std::vector<T>> wpart(nth2), bpart(nth2), cols(nth2);
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
          const int t = omp_get_thread_num();
          const T* gyn = gy + static_cast<int64_t>(n) * F * ohw;
          if (w.requires_grad()) {
            std::vector<T>& col = cols[t];
            if (col.empty()) col.resize(static_cast<size_t>(ckk) * ohw);
            if (wpart[t].empty()) wpart[t].assign(static_cast<size_t>(F) * ckk, T{0});
            detail::im2col(x.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh,
                           kw, stride, padding, oh, ow, col.data());
            gemm_rm(false, true, F, ckk, ohw, T{1}, gyn, ohw, col.data(), ohw, T{1},
                    wpart[t].data(), ckk);
          }
          if (b.requires_grad()) {
            if (bpart[t].empty()) bpart[t].assign(static_cast<size_t>(F), T{0});
            for (int f = 0; f < F; ++f) {
              double acc = 0.0;
              const T* row = gyn + static_cast<int64_t>(f) * ohw;
              for (int i = 0; i < ohw; ++i) acc += static_cast<double>(row[i]);
              bpart[t][static_cast<size_t>(f)] += static_cast<T>(acc);
            }
          }
        }
        if (w.requires_grad()) {
          T* gw = w.grad();
          for (int t = 0; t < nth2; ++t) {
            if (wpart[t].empty()) continue;
            for (int64_t i = 0; i < static_cast<int64_t>(F) * ckk; ++i) gw[i] += wpart[t][i];
          }
        }
        if (b.requires_grad()) {
          T* gb = b.grad();
          for (int t = 0; t < nth2; ++t) {
            if (bpart[t].empty()) continue;
            for (int f = 0; f < F; ++f) gb[f] += bpart[t][f];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization (2d)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                      T momentum = T{0.1}, T eps = T{1e-5}) {
  if (x.ndim() != 4) throw DimensionError("batchnorm2d: input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("batchnorm2d: gamma/beta length must equal channel count");
  }
  if (train && N < 2) {
    throw ConfigError("batchnorm2d: train mode needs batch size >= 2");
  }
  const int64_t m = N * H * W;
  const int64_t hw = H * W;
  std::vector<T> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));

  const T* xv = x.data();
  if (train) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double var = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      mean[static_cast<size_t>(c)] = static_cast<T>(mu);
      invstd[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      // biased variance normalizes the batch; the running estimate is unbiased
      T* rm = running_mean.data();
      T* rv = running_var.data();
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      rm[c] = (T{1} - momentum) * rm[c] + momentum * static_cast<T>(mu);
      rv[c] = (T{1} - momentum) * rv[c] + momentum * static_cast<T>(unbiased);
    }
  } else {
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = rm[c];
      invstd[static_cast<size_t>(c)] = T{1} / std::sqrt(rv[c] + eps);
    }
  }

  Tensor<T> y = Tensor<T>::zeros(x.shape());
  T* yv = y.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T mu = mean[static_cast<size_t>(c)];
      const T is = invstd[static_cast<size_t>(c)];
      const T ga = gv[c], be = bv[c];
      const T* p = xv + (n * C + c) * hw;
      T* q = yv + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * ga + be;
    }
  }

  if (detail::track(x, gamma, beta)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, gamma, beta, y, mean, invstd, N, C, hw, m, train]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* xv2 = x.data();
      const T* gv2 = gamma.data();
      if (gamma.requires_grad()) gamma.ensure_grad();
      if (beta.requires_grad()) beta.ensure_grad();
      if (x.requires_grad()) x.ensure_grad();
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C; ++c) {
        const T mu = mean[static_cast<size_t>(c)];
        const T is = invstd[static_cast<size_t>(c)];
        double s1 = 0.0, s2 = 0.0;  // sum g*xhat, sum g
        for (int64_t n = 0; n < N; ++n) {
          const T* xp = xv2 + (n * C + c) * hw;
          const T* gp = g + (n * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            s1 += static_cast<double>(gp[i]) * static_cast<double>((xp[i] - mu) * is);
            s2 += static_cast<double>(gp[i]);
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += static_cast<T>(s1);
        if (beta.requires_grad()) beta.grad()[c] += static_cast<T>(s2);
        if (x.requires_grad()) {
          T* gx = x.grad();
          const T ga_is = gv2[c] * is;
          if (train) {
            const T inv_m = T{1} / static_cast<T>(m);
            for (int64_t n = 0; n < N; ++n) {
              const T* xp = xv2 + (n * C + c) * hw;
              const T* gp = g + (n * C + c) * hw;
              T* gq = gx + (n * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const T xhat = (xp[i] - mu) * is;
                gq[i] += ga_is * (gp[i] - (static_cast<T>(s2) + xhat * static_cast<T>(s1)) * inv_m);
              }
            }
          } else {
            for (int64_t n = 0; n < N; ++n) {
              const T* gp = g + (n * C + c) * hw;
              T* gq = gx + (n * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) gq[i] += ga_is * gp[i];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel = 2, int stride = 2) {
  if (x.ndim() != 4) throw DimensionError("maxpool2d: input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H || kernel > W) throw DimensionError("maxpool2d: kernel larger than input");
  const int64_t oh = (H - kernel) / stride + 1;
  const int64_t ow = (W - kernel) / stride + 1;
  Tensor<T> y = Tensor<T>::zeros({N, C, oh, ow});
  auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(N * C * oh * ow));
  const T* xv = x.data();
  T* yv = y.data();
  int32_t* am = argmax->data();
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* plane = xv + (n * C + c) * H * W;
      T* out = yv + (n * C + c) * oh * ow;
      int32_t* amp = am + (n * C + c) * oh * ow;
      for (int64_t py = 0; py < oh; ++py) {
        for (int64_t px = 0; px < ow; ++px) {
          T best = plane[(py * stride) * W + px * stride];
          int32_t best_idx = static_cast<int32_t>((py * stride) * W + px * stride);
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int64_t idx = (py * stride + ky) * W + px * stride + kx;
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = static_cast<int32_t>(idx);
              }
            }
          }
          out[py * ow + px] = best;
          amp[py * ow + px] = best_idx;
        }
      }
    }
  }
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, argmax, N, C, H, W, oh, ow]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
      const int32_t* am2 = argmax->data();
#pragma omp parallel for schedule(static) collapse(2)
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const int64_t base_out = (n * C + c) * oh * ow;
          T* gplane = gx + (n * C + c) * H * W;
          for (int64_t i = 0; i < oh * ow; ++i) {
            gplane[am2[base_out + i]] += g[base_out + i];
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest_2x(const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimensionError("upsample_nearest_2x: input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y = Tensor<T>::zeros({N, C, 2 * H, 2 * W});
  const T* xv = x.data();
  T* yv = y.data();
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* plane = xv + (n * C + c) * H * W;
      T* out = yv + (n * C + c) * 4 * H * W;
      for (int64_t r = 0; r < H; ++r) {
        for (int64_t col = 0; col < W; ++col) {
          const T v = plane[r * W + col];
          out[(2 * r) * 2 * W + 2 * col] = v;
          out[(2 * r) * 2 * W + 2 * col + 1] = v;
          out[(2 * r + 1) * 2 * W + 2 * col] = v;
          out[(2 * r + 1) * 2 * W + 2 * col + 1] = v;
        }
      }
    }
  }
  if (detail::track(x)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([x, y, N, C, H, W]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      T* gx = x.grad();
#pragma omp parallel for schedule(static) collapse(2)
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const T* gout = g + (n * C + c) * 4 * H * W;
          T* gin = gx + (n * C + c) * H * W;
          for (int64_t r = 0; r < H; ++r) {
            for (int64_t col = 0; col < W; ++col) {
              gin[r * W + col] += gout[(2 * r) * 2 * W + 2 * col] +
                                  gout[(2 * r) * 2 * W + 2 * col + 1] +
                                  gout[(2 * r + 1) * 2 * W + 2 * col] +
                                  gout[(2 * r + 1) * 2 * W + 2 * col + 1];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling
// ---------------------------------------------------------------------------

namespace detail {

// Shared bilinear read with zero padding; coordinates are pixel-space.
// Also returns what the backward needs.
template <typename T>
struct BilinearTap {
  int x0, y0;
  T tx, ty;
  T v00, v01, v10, v11;
  T value;
};

template <typename T>
BilinearTap<T> bilinear_read(const T* plane, int H, int W, T ix, T iy) {
  BilinearTap<T> tap;
  const T fx = std::floor(ix);
  const T fy = std::floor(iy);
  tap.x0 = static_cast<int>(fx);
  tap.y0 = static_cast<int>(fy);
  tap.tx = ix - fx;
  tap.ty = iy - fy;
  auto at = [&](int yy, int xx) -> T {
    return (yy >= 0 && yy < H && xx >= 0 && xx < W) ? plane[yy * W + xx] : T{0};
  };
  tap.v00 = at(tap.y0, tap.x0);
  tap.v01 = at(tap.y0, tap.x0 + 1);
  tap.v10 = at(tap.y0 + 1, tap.x0);
  tap.v11 = at(tap.y0 + 1, tap.x0 + 1);
  tap.value = (T{1} - tap.ty) * ((T{1} - tap.tx) * tap.v00 + tap.tx * tap.v01) +
              tap.ty * ((T{1} - tap.tx) * tap.v10 + tap.tx * tap.v11);
  return tap;
}

}  // namespace detail

// input [C,H,W], grid [Hg,Wg,2] with normalized (x,y) in [-1,1]
// (align-corners convention); samples outside the input read zero.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& grid) {
  if (input.ndim() != 3) throw DimensionError("grid_sample: input must be [C,H,W]");
  if (grid.ndim() != 3 || grid.dim(2) != 2) {
    throw DimensionError(str_format("grid_sample: grid must be [H',W',2], got %s",
                                    shape_str(grid.shape()).c_str()));
  }
  const int C = static_cast<int>(input.dim(0));
  const int H = static_cast<int>(input.dim(1));
  const int W = static_cast<int>(input.dim(2));
  const int gh = static_cast<int>(grid.dim(0));
  const int gw = static_cast<int>(grid.dim(1));
  Tensor<T> y = Tensor<T>::zeros({C, gh, gw});
  const T* in = input.data();
  const T* gv = grid.data();
  T* yv = y.data();
  const T sx = static_cast<T>(W - 1) / T{2};
  const T sy = static_cast<T>(H - 1) / T{2};
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(gh) * gw * C > detail::kParMin)
  for (int p = 0; p < gh * gw; ++p) {
    const T ix = (gv[2 * p] + T{1}) * sx;
    const T iy = (gv[2 * p + 1] + T{1}) * sy;
    for (int c = 0; c < C; ++c) {
      yv[c * gh * gw + p] = detail::bilinear_read(in + c * H * W, H, W, ix, iy).value;
    }
  }
  if (detail::track(input, grid)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([input, grid, y, C, H, W, gh, gw, sx, sy]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* in2 = input.data();
      const T* gv2 = grid.data();
      T* gin = input.requires_grad() ? input.grad() : nullptr;
      T* ggrid = grid.requires_grad() ? grid.grad() : nullptr;
      for (int p = 0; p < gh * gw; ++p) {
        const T ix = (gv2[2 * p] + T{1}) * sx;
        const T iy = (gv2[2 * p + 1] + T{1}) * sy;
        T dx_acc = T{0}, dy_acc = T{0};
        for (int c = 0; c < C; ++c) {
          const T go = g[c * gh * gw + p];
          if (go == T{0}) continue;
          auto tap = detail::bilinear_read(in2 + c * H * W, H, W, ix, iy);
          if (gin) {
            T* plane = gin + c * H * W;
            auto scatter = [&](int yy, int xx, T wgt) {
              if (yy >= 0 && yy < H && xx >= 0 && xx < W) plane[yy * W + xx] += go * wgt;
            };
            scatter(tap.y0, tap.x0, (T{1} - tap.ty) * (T{1} - tap.tx));
            scatter(tap.y0, tap.x0 + 1, (T{1} - tap.ty) * tap.tx);
            scatter(tap.y0 + 1, tap.x0, tap.ty * (T{1} - tap.tx));
            scatter(tap.y0 + 1, tap.x0 + 1, tap.ty * tap.tx);
          }
          if (ggrid) {
            const T dv_dix = (T{1} - tap.ty) * (tap.v01 - tap.v00) + tap.ty * (tap.v11 - tap.v10);
            const T dv_diy = (T{1} - tap.tx) * (tap.v10 - tap.v00) + tap.tx * (tap.v11 - tap.v01);
            dx_acc += go * dv_dix;
            dy_acc += go * dv_diy;
          }
        }
        if (ggrid) {
          ggrid[2 * p] += dx_acc * sx;
          ggrid[2 * p + 1] += dy_acc * sy;
        }
      }
    });
  }
  return y;
}

}  // namespace asr
