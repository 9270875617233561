#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "asr/gradcheck.hpp"
#include "asr/render.hpp"
#include "test_util.hpp"

using namespace asr;
using asr::testing::random_tensor;

TEST_CASE("render_blob: 0.5 at radius, ~1 at center, rotation-symmetric") {
  const int r = 32;
  auto blob = render_blob<double>({1.0, 256}, r);
  const int S = 2 * r + 1;
  REQUIRE(blob.shape() == Shape{1, S, S});
  // pixel at distance exactly r along the axis
  REQUIRE(blob.data()[r * S + 0] == 0.5);
  REQUIRE(blob.data()[0 * S + r] == 0.5);
  // center ~ sigmoid(32)
  REQUIRE(blob.data()[r * S + r] == Catch::Approx(1.0).margin(1e-9));
  // radial function: exact symmetry under 90-degree rotation
  for (int u = 0; u < S; ++u) {
    for (int v = 0; v < S; ++v) {
      REQUIRE(blob.data()[u * S + v] == blob.data()[v * S + (S - 1 - u)]);
    }
  }
  REQUIRE_THROWS_AS(render_blob<double>({1.0, 256}, 0), ConfigError);
}

TEST_CASE("transform_blob: identity transform reproduces the blob") {
  auto blob = render_blob<double>({1.0, 64}, 8);
  auto w = Tensor<double>::scalar(1.0);
  auto h = Tensor<double>::scalar(1.0);
  auto d = Tensor<double>::scalar(0.0);
  auto out = transform_blob(blob, w, h, d);
  for (int64_t i = 0; i < blob.numel(); ++i) {
    REQUIRE(out.data()[i] == Catch::Approx(blob.data()[i]).margin(1e-6));
  }
}

TEST_CASE("transform_blob: (w=2,h=1,d=pi/2) matches (w=1,h=2,d=0)") {
  auto blob = render_blob<double>({1.0, 64}, 10);
  auto a = transform_blob(blob, Tensor<double>::scalar(2.0), Tensor<double>::scalar(1.0),
                          Tensor<double>::scalar(M_PI / 2));
  auto b = transform_blob(blob, Tensor<double>::scalar(1.0), Tensor<double>::scalar(2.0),
                          Tensor<double>::scalar(0.0));
  for (int64_t i = 0; i < a.numel(); ++i) {
    REQUIRE(a.data()[i] == Catch::Approx(b.data()[i]).margin(1e-4));
  }
}

TEST_CASE("transform_blob: gradient w.r.t. rotation matches finite differences") {
  auto blob = render_blob<double>({1.0, 64}, 6);
  std::mt19937_64 rng(5);
  auto probe = random_tensor<double>({1, 13, 13}, rng, 0.1, 1.0);
  auto w = Tensor<double>::scalar(1.3, true);
  auto h = Tensor<double>::scalar(0.7, true);
  auto d = Tensor<double>::scalar(0.9, true);
  auto loss = [&]() { return sum_all(mul(transform_blob(blob, w, h, d), probe)); };
  auto res = grad_check<double>(loss, {w, h, d}, 1e-6);
  REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("colorize scales channels by absorption") {
  auto blob = Tensor<double>::full({1, 2, 2}, 0.8);
  SECTION("zero absorption is blank") {
    auto out = colorize(blob, Tensor<double>::from_vec({3}, {0, 0, 0}));
    for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == 0.0);
  }
  SECTION("unit absorption copies the blob") {
    auto out = colorize(blob, Tensor<double>::from_vec({3}, {1, 1, 1}));
    for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == 0.8);
  }
  SECTION("half red") {
    auto out = colorize(blob, Tensor<double>::from_vec({3}, {0.5, 0.0, 0.0}));
    REQUIRE(out.data()[0] == Catch::Approx(0.4));
    REQUIRE(out.data()[4] == 0.0);
    REQUIRE(out.data()[8] == 0.0);
  }
}

TEST_CASE("fuse_canvas: empty input, full absorption, overlap product") {
  SECTION("no rasters -> full transmission") {
    auto canvas = fuse_canvas<double>({}, {}, 4, 4);
    for (int64_t i = 0; i < canvas.numel(); ++i) REQUIRE(canvas.data()[i] == 1.0);
  }
  SECTION("single raster of ones -> zero transmission where it lands") {
    auto raster = Tensor<double>::full({3, 2, 2}, 1.0);
    auto canvas = fuse_canvas<double>({raster}, {{1, 1}}, 4, 4);
    REQUIRE(canvas.data()[0] == 1.0);
    REQUIRE(canvas.data()[1 * 4 + 1] == 0.0);
    REQUIRE(canvas.data()[2 * 4 + 2] == 0.0);
  }
  SECTION("two overlapping 0.5 rasters -> 0.25") {
    auto r1 = Tensor<double>::full({3, 2, 2}, 0.5);
    auto r2 = Tensor<double>::full({3, 2, 2}, 0.5);
    auto canvas = fuse_canvas<double>({r1, r2}, {{0, 0}, {0, 1}}, 2, 3);
    REQUIRE(canvas.data()[0] == 0.5);           // only r1
    REQUIRE(canvas.data()[1] == 0.25);          // overlap
    REQUIRE(canvas.data()[2] == 0.5);           // only r2
  }
  SECTION("three stacked rasters multiply complements") {
    auto r1 = Tensor<double>::full({3, 1, 1}, 0.5);
    auto r2 = Tensor<double>::full({3, 1, 1}, 0.25);
    auto r3 = Tensor<double>::full({3, 1, 1}, 0.1);
    auto canvas = fuse_canvas<double>({r1, r2, r3}, {{0, 0}, {0, 0}, {0, 0}}, 1, 1);
    REQUIRE(canvas.data()[0] == Catch::Approx(0.5 * 0.75 * 0.9).margin(1e-12));
  }
  SECTION("rasters clip at the canvas border") {
    auto raster = Tensor<double>::full({3, 3, 3}, 1.0);
    auto canvas = fuse_canvas<double>({raster}, {{-2, -2}, }, 4, 4);
    REQUIRE(canvas.data()[0] == 0.0);   // (0,0) covered by raster cell (2,2)
    REQUIRE(canvas.data()[1] == 1.0);   // outside the clipped raster
  }
}

TEST_CASE("fuse_canvas is order-invariant") {
  std::mt19937_64 rng(7);
  std::vector<Tensor<double>> rasters;
  std::vector<std::pair<int, int>> pos;
  for (int i = 0; i < 6; ++i) {
    rasters.push_back(random_tensor<double>({3, 5, 5}, rng, 0.0, 1.0));
    pos.emplace_back(static_cast<int>(rng() % 6) - 1, static_cast<int>(rng() % 6) - 1);
  }
  auto base = fuse_canvas(rasters, pos, 8, 8);
  std::vector<size_t> order(rasters.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Tensor<double>> r2;
  std::vector<std::pair<int, int>> p2;
  for (size_t i : order) {
    r2.push_back(rasters[i]);
    p2.push_back(pos[i]);
  }
  auto shuffled = fuse_canvas(r2, p2, 8, 8);
  for (int64_t i = 0; i < base.numel(); ++i) {
    REQUIRE(shuffled.data()[i] == Catch::Approx(base.data()[i]).margin(1e-6));
  }
}

TEST_CASE("fuse_canvas gradients match finite differences") {
  std::mt19937_64 rng(11);
  auto r1 = random_tensor<double>({3, 3, 3}, rng, 0.1, 0.9, true);
  auto r2 = random_tensor<double>({3, 3, 3}, rng, 0.1, 0.9, true);
  auto probe = random_tensor<double>({3, 4, 4}, rng, 0.1, 1.0);
  auto loss = [&]() {
    return sum_all(mul(fuse_canvas<double>({r1, r2}, {{0, 0}, {1, 1}}, 4, 4), probe));
  };
  auto res = grad_check<double>(loss, {r1, r2}, 1e-6);
  REQUIRE(res.max_rel_err < 1e-4);
}

namespace {

// Granular reference for one image: per-cell transform + colorize + fuse,
// then scale canvases and background multiplied together.
Tensor<double> granular_scene(const std::vector<Tensor<double>>& params_per_scale,
                              const Tensor<double>& bg,
                              const std::vector<ScaleConfig>& scales,
                              const RenderConfig& cfg) {
  Tensor<double> out;
  for (size_t j = 0; j < scales.size(); ++j) {
    const auto& sc = scales[j];
    auto blob = render_blob<double>(cfg, sc.spacing);
    const auto& p = params_per_scale[j];
    const int64_t cells = p.dim(2) * p.dim(3);
    std::vector<Tensor<double>> rasters;
    std::vector<std::pair<int, int>> pos;
    for (int i = 0; i < sc.grid_h; ++i) {
      for (int k = 0; k < sc.grid_w; ++k) {
        const int64_t cell = static_cast<int64_t>(i) * sc.grid_w + k;
        auto at = [&](int ch) { return Tensor<double>::scalar(p.data()[ch * cells + cell]); };
        auto mono = transform_blob(blob, at(0), at(1), at(2));
        auto rgb = colorize(mono, Tensor<double>::from_vec(
                                      {3}, {p.data()[3 * cells + cell],
                                            p.data()[4 * cells + cell],
                                            p.data()[5 * cells + cell]}));
        rasters.push_back(rgb);
        pos.emplace_back(i * sc.spacing + sc.spacing / 2 - sc.spacing,
                         k * sc.spacing + sc.spacing / 2 - sc.spacing);
      }
    }
    auto canvas = reshape_copy(fuse_canvas(rasters, pos, cfg.image_side, cfg.image_side),
                               {1, 3, cfg.image_side, cfg.image_side});
    out = out.valid() ? mul(out, canvas) : canvas;
  }
  auto bgc = expand_nc(bg, cfg.image_side, cfg.image_side);
  return mul(out, bgc);
}

}  // namespace

TEST_CASE("fused render_scale agrees with the granular pipeline") {
  std::mt19937_64 rng(13);
  RenderConfig cfg{1.0, 32};
  std::vector<ScaleConfig> scales = {{2, 2, 16}, {1, 1, 32}};
  std::vector<Tensor<double>> params;
  params.push_back(random_tensor<double>({1, 6, 2, 2}, rng, 0.2, 0.9));
  params.push_back(random_tensor<double>({1, 6, 1, 1}, rng, 0.2, 0.9));
  auto bg = random_tensor<double>({1, 3}, rng, 0.5, 1.0);

  auto fused = render_scene(params, bg, scales, cfg);
  auto reference = granular_scene(params, bg, scales, cfg);
  REQUIRE(fused.shape() == reference.shape());
  for (int64_t i = 0; i < fused.numel(); ++i) {
    REQUIRE(fused.data()[i] == Catch::Approx(reference.data()[i]).margin(1e-6));
  }
}

TEST_CASE("render_scene: zero absorption passes the background through") {
  RenderConfig cfg{1.0, 32};
  std::vector<ScaleConfig> scales = {{2, 2, 16}};
  // arbitrary admissible shapes, zero absorption
  auto make_params = [](int64_t n) {
    auto p = Tensor<double>::zeros({n, 6, 2, 2});
    const int64_t cells = 4;
    for (int64_t img = 0; img < n; ++img) {
      for (int64_t i = 0; i < cells; ++i) {
        p.data()[(img * 6 + 0) * cells + i] = 1.0;   // w
        p.data()[(img * 6 + 1) * cells + i] = 0.7;   // h
        p.data()[(img * 6 + 2) * cells + i] = 0.4;   // d
      }
    }
    return p;
  };
  SECTION("white background -> white image") {
    auto bg = Tensor<double>::full({2, 3}, 1.0);
    auto img = render_scene<double>({make_params(2)}, bg, scales, cfg);
    for (int64_t i = 0; i < img.numel(); ++i) REQUIRE(img.data()[i] == 1.0);
  }
  SECTION("tinted background -> uniform tinted image") {
    auto bg = Tensor<double>::zeros({1, 3});
    bg.data()[0] = 0.8;
    bg.data()[1] = 0.6;
    bg.data()[2] = 0.9;
    auto img = render_scene<double>({make_params(1)}, bg, scales, cfg);
    const int64_t plane = 32 * 32;
    for (int64_t i = 0; i < plane; ++i) {
      REQUIRE(img.data()[0 * plane + i] == 0.8);
      REQUIRE(img.data()[1 * plane + i] == 0.6);
      REQUIRE(img.data()[2 * plane + i] == 0.9);
    }
  }
}

TEST_CASE("render_scene output stays in [0,1] and darkens with absorption") {
  std::mt19937_64 rng(17);
  RenderConfig cfg{1.0, 32};
  std::vector<ScaleConfig> scales = {{2, 2, 16}, {1, 1, 32}};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor<double>> params;
    params.push_back(random_tensor<double>({1, 6, 2, 2}, rng, 0.0, 1.0));
    params.push_back(random_tensor<double>({1, 6, 1, 1}, rng, 0.0, 1.0));
    // keep w,h in their real range
    for (auto& p : params) {
      const int64_t cells = p.dim(2) * p.dim(3);
      for (int64_t i = 0; i < 2 * cells; ++i) {
        p.data()[i] = 0.1 + 1.9 * p.data()[i];
      }
    }
    auto bg = random_tensor<double>({1, 3}, rng, 0.0, 1.0);
    auto img = render_scene(params, bg, scales, cfg);
    for (int64_t i = 0; i < img.numel(); ++i) {
      REQUIRE(img.data()[i] >= 0.0);
      REQUIRE(img.data()[i] <= 1.0);
    }
    // raise one absorption channel of one cell; that channel darkens weakly
    const int ch = 3 + static_cast<int>(rng() % 3);
    const int64_t cells0 = 4;
    const int64_t cell = static_cast<int64_t>(rng() % cells0);
    auto bumped = params[0].clone_values();
    double v = bumped.data()[ch * cells0 + cell];
    bumped.data()[ch * cells0 + cell] = std::min(1.0, v + 0.3);
    auto img2 = render_scene<double>({bumped, params[1]}, bg, scales, cfg);
    const int64_t plane = 32 * 32;
    const int c = ch - 3;
    for (int64_t i = 0; i < plane; ++i) {
      REQUIRE(img2.data()[c * plane + i] <= img.data()[c * plane + i] + 1e-12);
    }
  }
}

TEST_CASE("render_scale end-to-end gradient vs finite differences") {
  std::mt19937_64 rng(19);
  RenderConfig cfg{1.0, 32};
  std::vector<ScaleConfig> scales = {{2, 2, 16}};
  auto params = random_tensor<double>({1, 6, 2, 2}, rng, 0.15, 0.9, true);
  auto bg = random_tensor<double>({1, 3}, rng, 0.4, 1.0, true);
  auto probe = random_tensor<double>({1, 3, 32, 32}, rng, 0.1, 1.0);
  auto loss = [&]() {
    return sum_all(mul(render_scene<double>({params}, bg, scales, cfg), probe));
  };
  auto res = grad_check<double>(loss, {params, bg}, 1e-6);
  REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("render_scene rejects bad grids and bg shapes") {
  RenderConfig cfg{1.0, 32};
  auto params = Tensor<double>::zeros({1, 6, 2, 2});
  auto bg = Tensor<double>::zeros({1, 2});
  REQUIRE_THROWS_AS(render_scene<double>({params}, bg, {{2, 2, 16}}, cfg), DimensionError);
  auto bg3 = Tensor<double>::zeros({1, 3});
  REQUIRE_THROWS_AS(render_scene<double>({params}, bg3, {{2, 2, 8}}, cfg), ConfigError);
}
