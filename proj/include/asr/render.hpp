#pragma once

// Differentiable ellipse renderer. Primitives are soft-edged blobs: a base
// raster holds sigmoid(sharpness * (r - distance)) around the raster
// center, an inverse-mapped affine warp scales/rotates it per cell, an RGB
// absorption vector colorizes it, and rasters fuse into a per-scale canvas
// by multiplying complements per channel (transmissive imaging: values are
// transmission in [0,1], 1 = no ink). Scale canvases and the background
// multiply into the final reconstruction.
//
// Two equivalent paths exist: fine-grained tape ops (render_blob,
// make_affine_grid, transform_blob, colorize, fuse_canvas), used in tests
// and verification, and render_scale, a single batched tape node that walks
// cells and pixels directly. Both are built on the same inline sampling
// helpers so they agree to rounding.
//
// Nothing in this file owns a trainable parameter.

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "asr/ops.hpp"

namespace asr {

struct ScaleConfig {
  int grid_h = 0;
  int grid_w = 0;
  int spacing = 0;  // cell pitch in pixels; also the base blob radius

  int raster_side() const { return 2 * spacing + 1; }
};

struct RenderConfig {
  double sharpness = 1.0;
  int image_side = 256;
};

inline void validate_scale(const ScaleConfig& s, int image_side) {
  if (s.grid_h <= 0 || s.grid_w <= 0 || s.spacing < 1) {
    throw ConfigError("scale: grid dims and spacing must be positive");
  }
  if (s.grid_h * s.spacing != image_side || s.grid_w * s.spacing != image_side) {
    throw ConfigError(str_format("scale: grid %dx%d at spacing %d does not tile side %d",
                                 s.grid_h, s.grid_w, s.spacing, image_side));
  }
}

// Plain (non-tracked) primitive descriptor; the trainable path keeps these
// packed in a [N,6,gh,gw] tensor with channels (w,h,d,ar,ag,ab).
template <typename T>
struct EllipseParams {
  T w = T{1};
  T h = T{1};
  T d = T{0};
  std::array<T, 3> a{T{0}, T{0}, T{0}};
};

namespace detail {

// Inverse-mapped affine: an output raster pixel pulls from the base blob.
// Normalized coords put the raster center at 0 and its edge at +-1.
template <typename T>
struct CellXform {
  T w, h, cosd, sind;

  CellXform(T w_, T h_, T d_) : w(w_), h(h_), cosd(std::cos(d_)), sind(std::sin(d_)) {}

  // (x_o, y_o) normalized output position -> normalized source position
  void source(T x_o, T y_o, T& x_s, T& y_s) const {
    x_s = (cosd * x_o + sind * y_o) / w;
    y_s = (-sind * x_o + cosd * y_o) / h;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Fine-grained ops
// ---------------------------------------------------------------------------

// Base blob raster of side 2r+1: sigmoid(sharpness * (r - d(p))) around the
// center, so the value at distance exactly r is 0.5. Constant w.r.t. all
// trainable inputs.
template <typename T>
Tensor<T> render_blob(const RenderConfig& cfg, int r) {
  if (r < 1) throw ConfigError("render_blob: radius must be >= 1");
  if (cfg.sharpness <= 0) throw ConfigError("render_blob: sharpness must be positive");
  const int side = 2 * r + 1;
  Tensor<T> blob = Tensor<T>::zeros({1, side, side});
  T* v = blob.data();
  const T sharp = static_cast<T>(cfg.sharpness);
  for (int u = 0; u < side; ++u) {
    for (int w = 0; w < side; ++w) {
      const T dy = static_cast<T>(u - r);
      const T dx = static_cast<T>(w - r);
      const T dist = std::sqrt(dx * dx + dy * dy);
      v[u * side + w] = sigmoid_val(sharp * (static_cast<T>(r) - dist));
    }
  }
  return blob;
}

// Sampling grid for the inverse-mapped affine given scalar tensors w, h, d.
// Differentiable w.r.t. all three.
template <typename T>
Tensor<T> make_affine_grid(const Tensor<T>& w, const Tensor<T>& h, const Tensor<T>& d,
                           int side) {
  if (w.numel() != 1 || h.numel() != 1 || d.numel() != 1) {
    throw ContractError("make_affine_grid: w, h, d must be scalars");
  }
  const T wv = w.item(), hv = h.item(), dv = d.item();
  detail::CellXform<T> xf(wv, hv, dv);
  const T c = static_cast<T>(side - 1) / T{2};
  Tensor<T> grid = Tensor<T>::zeros({side, side, 2});
  T* g = grid.data();
  for (int u = 0; u < side; ++u) {
    for (int v = 0; v < side; ++v) {
      const T x_o = (static_cast<T>(v) - c) / c;
      const T y_o = (static_cast<T>(u) - c) / c;
      T x_s, y_s;
      xf.source(x_o, y_o, x_s, y_s);
      g[(u * side + v) * 2] = x_s;
      g[(u * side + v) * 2 + 1] = y_s;
    }
  }
  if (detail::track(w, h, d)) {
    grid.set_requires_grad(true);
    Tape<T>::current()->record([w, h, d, grid, wv, hv, dv, side, c]() {
      if (!grid.has_grad()) return;
      const T* gg = grid.grad();
      const T cosd = std::cos(dv), sind = std::sin(dv);
      double acc_w = 0.0, acc_h = 0.0, acc_d = 0.0;
      for (int u = 0; u < side; ++u) {
        for (int v = 0; v < side; ++v) {
          const T x_o = (static_cast<T>(v) - c) / c;
          const T y_o = (static_cast<T>(u) - c) / c;
          const T gx = gg[(u * side + v) * 2];
          const T gy = gg[(u * side + v) * 2 + 1];
          const T rot_x = cosd * x_o + sind * y_o;
          const T rot_y = -sind * x_o + cosd * y_o;
          acc_w += static_cast<double>(gx * (-rot_x / (wv * wv)));
          acc_h += static_cast<double>(gy * (-rot_y / (hv * hv)));
          acc_d += static_cast<double>(gx * (rot_y / wv) + gy * (-rot_x / hv));
        }
      }
      if (w.requires_grad()) w.grad()[0] += static_cast<T>(acc_w);
      if (h.requires_grad()) h.grad()[0] += static_cast<T>(acc_h);
      if (d.requires_grad()) d.grad()[0] += static_cast<T>(acc_d);
    });
  }
  return grid;
}

// Scale by (w,h), rotate by d about the raster center.
template <typename T>
Tensor<T> transform_blob(const Tensor<T>& blob, const Tensor<T>& w, const Tensor<T>& h,
                         const Tensor<T>& d) {
  if (blob.ndim() != 3 || blob.dim(1) != blob.dim(2) || blob.dim(1) % 2 == 0) {
    throw ContractError("transform_blob: blob must be [1,s,s] with odd s");
  }
  auto grid = make_affine_grid(w, h, d, static_cast<int>(blob.dim(1)));
  return grid_sample_bilinear(blob, grid);
}

// Monochrome raster times per-channel absorption.
template <typename T>
Tensor<T> colorize(const Tensor<T>& blob, const Tensor<T>& a) {
  if (blob.ndim() != 3 || blob.dim(0) != 1) throw ContractError("colorize: blob must be [1,s,s]");
  if (a.numel() != 3) throw ContractError("colorize: appearance must have 3 components");
  const int64_t hw = blob.dim(1) * blob.dim(2);
  Tensor<T> y = Tensor<T>::zeros({3, blob.dim(1), blob.dim(2)});
  const T* bv = blob.data();
  const T* av = a.data();
  T* yv = y.data();
  for (int c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < hw; ++i) yv[c * hw + i] = av[c] * bv[i];
  }
  if (detail::track(blob, a)) {
    y.set_requires_grad(true);
    Tape<T>::current()->record([blob, a, y, hw]() {
      if (!y.has_grad()) return;
      const T* g = y.grad();
      const T* bv2 = blob.data();
      const T* av2 = a.data();
      if (a.requires_grad()) {
        T* ga = a.grad();
        for (int c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(g[c * hw + i] * bv2[i]);
          ga[c] += static_cast<T>(acc);
        }
      }
      if (blob.requires_grad()) {
        T* gb = blob.grad();
        for (int c = 0; c < 3; ++c) {
          for (int64_t i = 0; i < hw; ++i) gb[i] += g[c * hw + i] * av2[c];
        }
      }
    });
  }
  return y;
}

// Complement-product fusion of colorized rasters onto an HxW canvas.
// positions give each raster's top-left corner in canvas pixels; raster
// parts outside the canvas clip away. Empty input gives full transmission.
template <typename T>
Tensor<T> fuse_canvas(const std::vector<Tensor<T>>& rasters,
                      const std::vector<std::pair<int, int>>& positions, int H, int W) {
  if (rasters.size() != positions.size()) {
    throw ContractError("fuse_canvas: one position per raster required");
  }
  Tensor<T> canvas = Tensor<T>::full({3, H, W}, T{1});
  T* cv = canvas.data();
  for (size_t i = 0; i < rasters.size(); ++i) {
    const auto& rt = rasters[i];
    if (rt.ndim() != 3 || rt.dim(0) != 3) throw ContractError("fuse_canvas: rasters must be [3,s,s]");
    const int rh = static_cast<int>(rt.dim(1)), rw = static_cast<int>(rt.dim(2));
    const auto [top, left] = positions[i];
    const T* rv = rt.data();
    for (int c = 0; c < 3; ++c) {
      for (int u = 0; u < rh; ++u) {
        const int y = top + u;
        if (y < 0 || y >= H) continue;
        for (int v = 0; v < rw; ++v) {
          const int x = left + v;
          if (x < 0 || x >= W) continue;
          cv[(c * H + y) * W + x] *= T{1} - rv[(c * rh + u) * rw + v];
        }
      }
    }
  }

  bool need_grad = Tape<T>::recording();
  if (need_grad) {
    bool any = false;
    for (const auto& rt : rasters) any = any || rt.requires_grad();
    need_grad = any;
  }
  if (need_grad) {
    canvas.set_requires_grad(true);
    auto rasters_copy = std::make_shared<std::vector<Tensor<T>>>(rasters);
    auto pos_copy = std::make_shared<std::vector<std::pair<int, int>>>(positions);
    Tape<T>::current()->record([rasters_copy, pos_copy, canvas, H, W]() {
      if (!canvas.has_grad()) return;
      const T* g = canvas.grad();
      const auto& rs = *rasters_copy;
      const auto& ps = *pos_copy;
      // covering raster lists per pixel; leave-one-out products avoid
      // dividing by a possibly-zero complement
      std::vector<std::vector<int>> cover(static_cast<size_t>(H) * W);
      for (size_t i = 0; i < rs.size(); ++i) {
        const int rh = static_cast<int>(rs[i].dim(1)), rw = static_cast<int>(rs[i].dim(2));
        for (int u = 0; u < rh; ++u) {
          const int y = ps[i].first + u;
          if (y < 0 || y >= H) continue;
          for (int v = 0; v < rw; ++v) {
            const int x = ps[i].second + v;
            if (x < 0 || x >= W) continue;
            cover[static_cast<size_t>(y) * W + x].push_back(static_cast<int>(i));
          }
        }
      }
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const auto& lst = cover[static_cast<size_t>(y) * W + x];
          if (lst.empty()) continue;
          for (int c = 0; c < 3; ++c) {
            const T gp = g[(c * H + y) * W + x];
            if (gp == T{0}) continue;
            for (size_t j = 0; j < lst.size(); ++j) {
              const int i = lst[j];
              if (!rs[static_cast<size_t>(i)].requires_grad()) continue;
              T loo = T{1};
              for (size_t k = 0; k < lst.size(); ++k) {
                if (k == j) continue;
                const int o = lst[k];
                const int rh = static_cast<int>(rs[static_cast<size_t>(o)].dim(1));
                const int rw = static_cast<int>(rs[static_cast<size_t>(o)].dim(2));
                const int uu = y - ps[static_cast<size_t>(o)].first;
                const int vv = x - ps[static_cast<size_t>(o)].second;
                loo *= T{1} - rs[static_cast<size_t>(o)].data()[(c * rh + uu) * rw + vv];
              }
              const int rh = static_cast<int>(rs[static_cast<size_t>(i)].dim(1));
              const int rw = static_cast<int>(rs[static_cast<size_t>(i)].dim(2));
              const int uu = y - ps[static_cast<size_t>(i)].first;
              const int vv = x - ps[static_cast<size_t>(i)].second;
              rs[static_cast<size_t>(i)].grad()[(c * rh + uu) * rw + vv] -= gp * loo;
            }
          }
        }
      }
    });
  }
  return canvas;
}

// ---------------------------------------------------------------------------
// Fused batched per-scale rendering
// ---------------------------------------------------------------------------

namespace detail {

// Cells with |pixel - center| <= spacing in both axes cover the pixel;
// candidates are the pixel's own cell and its immediate neighbors.
struct CellRange {
  int lo, hi;
};

inline CellRange covering_cells(int pixel, int spacing, int grid) {
  const int q = pixel / spacing;
  const int rem = pixel - q * spacing;
  const int half = spacing / 2;
  int lo = q, hi = q;
  if (rem <= half && q - 1 >= 0) lo = q - 1;
  if (rem >= half && q + 1 < grid) hi = q + 1;
  return {lo, hi};
}

template <typename T>
struct CellCache {
  T w, h, cosd, sind;
  T a[3];
};

}  // namespace detail

// One tape node: params [N,6,gh,gw] (channels w,h,d,ar,ag,ab, already
// range-mapped), shared base blob [1,S,S] for this scale, output canvas
// [N,3,side,side]. Forward and backward parallelize over images; every
// cell's gradient lands in its own slots, so writes stay disjoint.
template <typename T>
Tensor<T> render_scale(const Tensor<T>& params, const Tensor<T>& blob,
                       const ScaleConfig& scale, int image_side) {
  if (params.ndim() != 4 || params.dim(1) != 6) {
    throw DimensionError("render_scale: params must be [N,6,gh,gw]");
  }
  if (params.dim(2) != scale.grid_h || params.dim(3) != scale.grid_w) {
    throw ConfigError(str_format("render_scale: params grid %lldx%lld != configured %dx%d",
                                 static_cast<long long>(params.dim(2)),
                                 static_cast<long long>(params.dim(3)), scale.grid_h,
                                 scale.grid_w));
  }
  validate_scale(scale, image_side);
  const int N = static_cast<int>(params.dim(0));
  const int gh = scale.grid_h, gw = scale.grid_w, r = scale.spacing;
  const int S = scale.raster_side();
  if (blob.numel() != static_cast<int64_t>(S) * S) {
    throw DimensionError("render_scale: blob raster does not match scale spacing");
  }
  const int side = image_side;
  const int half = r / 2;
  const int64_t cells = static_cast<int64_t>(gh) * gw;
  const int64_t plane = static_cast<int64_t>(side) * side;

  auto load_cells = [gh, gw, cells](const T* pv, std::vector<detail::CellCache<T>>& cache) {
    cache.resize(static_cast<size_t>(cells));
    const int64_t g2 = static_cast<int64_t>(gh) * gw;
    for (int64_t cell = 0; cell < cells; ++cell) {
      detail::CellCache<T>& cc = cache[static_cast<size_t>(cell)];
      cc.w = pv[0 * g2 + cell];
      cc.h = pv[1 * g2 + cell];
      if (cc.w < T{1e-3} || cc.h < T{1e-3}) {
        throw ContractError("render_scale: scale factors must stay above the 0.1 floor");
      }
      const T d = pv[2 * g2 + cell];
      cc.cosd = std::cos(d);
      cc.sind = std::sin(d);
      cc.a[0] = pv[3 * g2 + cell];
      cc.a[1] = pv[4 * g2 + cell];
      cc.a[2] = pv[5 * g2 + cell];
    }
  };

  Tensor<T> canvas = Tensor<T>::full({N, 3, side, side}, T{1});
  const T* bl = blob.data();
  const T rn = static_cast<T>(r);

#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    std::vector<detail::CellCache<T>> cache;
    load_cells(params.data() + static_cast<int64_t>(n) * 6 * cells, cache);
    T* out = canvas.data() + static_cast<int64_t>(n) * 3 * plane;
    for (int y = 0; y < side; ++y) {
      const auto ry = detail::covering_cells(y, r, gh);
      for (int x = 0; x < side; ++x) {
        const auto rx = detail::covering_cells(x, r, gw);
        T acc[3] = {T{1}, T{1}, T{1}};
        for (int i = ry.lo; i <= ry.hi; ++i) {
          const int u = y - i * r + half;  // local raster row, 0..2r
          if (u < 0 || u >= S) continue;
          for (int k = rx.lo; k <= rx.hi; ++k) {
            const int v = x - k * r + half;
            if (v < 0 || v >= S) continue;
            const detail::CellCache<T>& cc = cache[static_cast<size_t>(i) * gw + k];
            const T x_o = (static_cast<T>(v) - rn) / rn;
            const T y_o = (static_cast<T>(u) - rn) / rn;
            const T x_s = (cc.cosd * x_o + cc.sind * y_o) / cc.w;
            const T y_s = (-cc.sind * x_o + cc.cosd * y_o) / cc.h;
            const T ix = (x_s + T{1}) * rn;
            const T iy = (y_s + T{1}) * rn;
            const T b = detail::bilinear_read(bl, S, S, ix, iy).value;
            acc[0] *= T{1} - cc.a[0] * b;
            acc[1] *= T{1} - cc.a[1] * b;
            acc[2] *= T{1} - cc.a[2] * b;
          }
        }
        out[0 * plane + y * side + x] = acc[0];
        out[1 * plane + y * side + x] = acc[1];
        out[2 * plane + y * side + x] = acc[2];
      }
    }
  }

  if (detail::track(params)) {
    canvas.set_requires_grad(true);
    Tape<T>::current()->record([params, blob, canvas, N, gh, gw, r, S, side, half, cells,
                                plane, load_cells]() {
      if (!canvas.has_grad()) return;
      const T* g = canvas.grad();
      const T* bl2 = blob.data();
      const T rn2 = static_cast<T>(r);
      T* gparams_all = params.grad();  // allocate before the parallel region
#pragma omp parallel for schedule(static)
      for (int n = 0; n < N; ++n) {
        std::vector<detail::CellCache<T>> cache;
        load_cells(params.data() + static_cast<int64_t>(n) * 6 * cells, cache);
        // per-cell (dw, dh, dd, da0, da1, da2), double accumulation
        std::vector<std::array<double, 6>> acc(static_cast<size_t>(cells),
                                               {0, 0, 0, 0, 0, 0});
        const T* gn = g + static_cast<int64_t>(n) * 3 * plane;
        for (int y = 0; y < side; ++y) {
          const auto ry = detail::covering_cells(y, r, gh);
          for (int x = 0; x < side; ++x) {
            const auto rx = detail::covering_cells(x, r, gw);
            // gather covering cells and their taps
            struct Hit {
              int cell;
              int u, v;
              detail::BilinearTap<T> tap;
              T fac[3];
            };
            Hit hits[9];
            int m = 0;
            for (int i = ry.lo; i <= ry.hi; ++i) {
              const int u = y - i * r + half;
              if (u < 0 || u >= S) continue;
              for (int k = rx.lo; k <= rx.hi; ++k) {
                const int v = x - k * r + half;
                if (v < 0 || v >= S) continue;
                const detail::CellCache<T>& cc = cache[static_cast<size_t>(i) * gw + k];
                const T x_o = (static_cast<T>(v) - rn2) / rn2;
                const T y_o = (static_cast<T>(u) - rn2) / rn2;
                const T x_s = (cc.cosd * x_o + cc.sind * y_o) / cc.w;
                const T y_s = (-cc.sind * x_o + cc.cosd * y_o) / cc.h;
                const T ix = (x_s + T{1}) * rn2;
                const T iy = (y_s + T{1}) * rn2;
                Hit& hit = hits[m++];
                hit.cell = i * gw + k;
                hit.u = u;
                hit.v = v;
                hit.tap = detail::bilinear_read(bl2, S, S, ix, iy);
                hit.fac[0] = T{1} - cc.a[0] * hit.tap.value;
                hit.fac[1] = T{1} - cc.a[1] * hit.tap.value;
                hit.fac[2] = T{1} - cc.a[2] * hit.tap.value;
              }
            }
            if (m == 0) continue;
            const T gp[3] = {gn[0 * plane + y * side + x], gn[1 * plane + y * side + x],
                             gn[2 * plane + y * side + x]};
            if (gp[0] == T{0} && gp[1] == T{0} && gp[2] == T{0}) continue;
            for (int j = 0; j < m; ++j) {
              const Hit& hit = hits[j];
              const detail::CellCache<T>& cc = cache[static_cast<size_t>(hit.cell)];
              auto& a6 = acc[static_cast<size_t>(hit.cell)];
              T db = T{0};
              for (int c = 0; c < 3; ++c) {
                if (gp[c] == T{0}) continue;
                T loo = T{1};
                for (int o = 0; o < m; ++o) {
                  if (o != j) loo *= hits[o].fac[c];
                }
                const T dfac = gp[c] * loo;  // d canvas / d fac_j
                a6[3 + c] -= static_cast<double>(dfac * hit.tap.value);
                db -= dfac * cc.a[c];
              }
              if (db == T{0}) continue;
              // through the bilinear tap into pixel coordinates
              const auto& tap = hit.tap;
              const T dv_dix = (T{1} - tap.ty) * (tap.v01 - tap.v00) + tap.ty * (tap.v11 - tap.v10);
              const T dv_diy = (T{1} - tap.tx) * (tap.v10 - tap.v00) + tap.tx * (tap.v11 - tap.v01);
              const T dix = db * dv_dix;
              const T diy = db * dv_diy;
              // pixel coords = (source_norm + 1) * r
              const T dxs = dix * rn2;
              const T dys = diy * rn2;
              const T x_o = (static_cast<T>(hit.v) - rn2) / rn2;
              const T y_o = (static_cast<T>(hit.u) - rn2) / rn2;
              const T rot_x = cc.cosd * x_o + cc.sind * y_o;   // = x_s * w
              const T rot_y = -cc.sind * x_o + cc.cosd * y_o;  // = y_s * h
              a6[0] += static_cast<double>(dxs * (-rot_x / (cc.w * cc.w)));
              a6[1] += static_cast<double>(dys * (-rot_y / (cc.h * cc.h)));
              a6[2] += static_cast<double>(dxs * (rot_y / cc.w) + dys * (-rot_x / cc.h));
            }
          }
        }
        T* gparams = gparams_all + static_cast<int64_t>(n) * 6 * cells;
        for (int64_t cell = 0; cell < cells; ++cell) {
          for (int c = 0; c < 6; ++c) {
            gparams[c * cells + cell] += static_cast<T>(acc[static_cast<size_t>(cell)][c]);
          }
        }
      }
    });
  }
  return canvas;
}

// Whole-scene rendering: per-scale canvases multiplied together and with the
// uniform background canvas. params_per_scale[j] is [N,6,gh_j,gw_j] mapped
// parameters; bg is [N,3] in [0,1].
template <typename T>
Tensor<T> render_scene(const std::vector<Tensor<T>>& params_per_scale,
                       const Tensor<T>& bg, const std::vector<ScaleConfig>& scales,
                       const RenderConfig& cfg,
                       const std::vector<Tensor<T>>* blobs = nullptr) {
  if (params_per_scale.size() != scales.size()) {
    throw ContractError("render_scene: one params tensor per scale required");
  }
  if (bg.ndim() != 2 || bg.dim(1) != 3) throw DimensionError("render_scene: bg must be [N,3]");
  Tensor<T> out;
  for (size_t j = 0; j < scales.size(); ++j) {
    Tensor<T> blob = blobs ? (*blobs)[j] : render_blob<T>(cfg, scales[j].spacing);
    Tensor<T> canvas = render_scale(params_per_scale[j], blob, scales[j], cfg.image_side);
    out = j == 0 ? canvas : mul(out, canvas);
  }
  Tensor<T> bg_canvas = expand_nc(bg, cfg.image_side, cfg.image_side);
  return out.valid() ? mul(out, bg_canvas) : bg_canvas;
}

}  // namespace asr
