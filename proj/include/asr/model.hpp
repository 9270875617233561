#pragma once

// The two trained architectures. AsrModel: ConvBlock encoder whose per-block
// latents feed strided 1x1-conv Modelers that emit ellipse parameters per
// grid cell, plus a BackgroundBlock for the global background color; the
// renderer turns those into the reconstruction. BaselineModel: a plain
// convolutional autoencoder with one global latent.

#include <array>
#include <string>
#include <vector>

#include "asr/init.hpp"
#include "asr/ops.hpp"
#include "asr/render.hpp"

namespace asr {

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1;
  int pad = 0;

  static Conv2dLayer make(int in_ch, int out_ch, int kernel, int stride, int pad) {
    Conv2dLayer l;
    l.w = Tensor<T>::zeros({out_ch, in_ch, kernel, kernel}, true);
    l.b = Tensor<T>::zeros({out_ch}, true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

  int64_t fan_in() const { return w.dim(1) * w.dim(2) * w.dim(3); }
  int64_t fan_out() const { return w.dim(0) * w.dim(2) * w.dim(3); }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;

  static BatchNormLayer make(int ch) {
    BatchNormLayer l;
    l.gamma = Tensor<T>::full({ch}, T{1}, true);
    l.beta = Tensor<T>::zeros({ch}, true);
    l.running_mean = Tensor<T>::zeros({ch});
    l.running_var = Tensor<T>::full({ch}, T{1});
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, train);
  }
};

template <typename T>
struct DenseLayer {
  Tensor<T> w, b;

  static DenseLayer make(int in_f, int out_f) {
    DenseLayer l;
    l.w = Tensor<T>::zeros({in_f, out_f}, true);
    l.b = Tensor<T>::zeros({out_f}, true);
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return dense(x, w, b); }
};

// ---------------------------------------------------------------------------
// ASR model
// ---------------------------------------------------------------------------

struct ScaleSpec {
  int grid_h = 0;
  int grid_w = 0;
  int spacing = 0;        // pixels between cell anchors; also base blob radius
  int block_index = 0;    // which ConvBlock latent feeds this scale's modeler
  int modeler_stride = 1; // stride of the 1x1 modeler conv over that latent
};

struct AsrConfig {
  int image_side = 256;
  int conv_kernel = 5;
  std::vector<int> conv_channels = {32, 64, 128};  // per block; two stride-2 convs each
  int bg_hidden = 64;
  double sharpness = 1.0;
  std::vector<ScaleSpec> scales = {
      {8, 8, 32, 0, 8},
      {4, 4, 64, 1, 4},
      {2, 2, 128, 2, 2},
  };

  int n_blocks() const { return static_cast<int>(conv_channels.size()); }
  int n_scales() const { return static_cast<int>(scales.size()); }

  // spatial side of block b's output (each block downsamples 4x)
  int block_side(int b) const {
    int side = image_side;
    for (int i = 0; i <= b; ++i) side /= 4;
    return side;
  }

  int total_primitives() const {
    int n = 0;
    for (const auto& s : scales) n += s.grid_h * s.grid_w;
    return n;
  }
  int structural_latent_dim() const { return 6 * total_primitives(); }

  void validate() const {
    if (conv_channels.empty()) throw ConfigError("asr: need at least one ConvBlock");
    if (scales.empty()) throw ConfigError("asr: need at least one scale");
    for (const auto& s : scales) {
      validate_scale({s.grid_h, s.grid_w, s.spacing}, image_side);
      if (s.block_index < 0 || s.block_index >= n_blocks()) {
        throw ConfigError("asr: scale references a missing ConvBlock");
      }
      const int zs = block_side(s.block_index);
      const int out = (zs - 1) / s.modeler_stride + 1;
      if (out != s.grid_h || out != s.grid_w) {
        throw ConfigError(str_format(
            "asr: modeler stride %d over a %dx%d latent yields %dx%d, expected %dx%d",
            s.modeler_stride, zs, zs, out, out, s.grid_h, s.grid_w));
      }
    }
    if (sharpness <= 0) throw ConfigError("asr: sharpness must be positive");
  }
};

// Maps modeler sigmoid outputs (gated) to rendering ranges:
//   w, h -> 0.1 + 1.9 * v    d -> 2*pi * v    a -> v
// The gate multiplies the sigmoid outputs before the range map, so a gate
// of zero leaves minimal (w=h=0.1) invisible primitives, not empty cells.
template <typename T>
Tensor<T> map_modeler_outputs(const Tensor<T>& sig, T gate) {
  if (sig.ndim() != 4 || sig.dim(1) != 6) {
    throw DimensionError("map_modeler_outputs: expected [N,6,gh,gw]");
  }
  static const T kTwoPi = static_cast<T>(6.283185307179586476925286766559);
  const int64_t N = sig.dim(0);
  const int64_t cells = sig.dim(2) * sig.dim(3);
  Tensor<T> out = Tensor<T>::zeros(sig.shape());
  const T* sv = sig.data();
  T* ov = out.data();
  const T scale_c[6] = {T{1.9}, T{1.9}, kTwoPi, T{1}, T{1}, T{1}};
  const T offset_c[6] = {T{0.1}, T{0.1}, T{0}, T{0}, T{0}, T{0}};
  for (int64_t n = 0; n < N; ++n) {
    for (int c = 0; c < 6; ++c) {
      const T* s = sv + (n * 6 + c) * cells;
      T* o = ov + (n * 6 + c) * cells;
      for (int64_t i = 0; i < cells; ++i) o[i] = offset_c[c] + scale_c[c] * gate * s[i];
    }
  }
  if (detail::track(sig)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([sig, out, N, cells, gate]() {
      if (!out.has_grad()) return;
      static const T kTwoPi2 = static_cast<T>(6.283185307179586476925286766559);
      const T scale_c2[6] = {T{1.9}, T{1.9}, kTwoPi2, T{1}, T{1}, T{1}};
      const T* g = out.grad();
      T* gs = sig.grad();
      for (int64_t n = 0; n < N; ++n) {
        for (int c = 0; c < 6; ++c) {
          const T k = scale_c2[c] * gate;
          const T* gp = g + (n * 6 + c) * cells;
          T* gq = gs + (n * 6 + c) * cells;
          for (int64_t i = 0; i < cells; ++i) gq[i] += gp[i] * k;
        }
      }
    });
  }
  return out;
}

template <typename T>
class AsrModel {
 public:
  struct ConvBlock {
    Conv2dLayer<T> conv0, conv1;
    BatchNormLayer<T> bn0, bn1;
  };

  explicit AsrModel(AsrConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int in_ch = 3;
    for (int b = 0; b < cfg_.n_blocks(); ++b) {
      const int out_ch = cfg_.conv_channels[static_cast<size_t>(b)];
      ConvBlock block;
      block.conv0 = Conv2dLayer<T>::make(in_ch, out_ch, cfg_.conv_kernel, 2, cfg_.conv_kernel / 2);
      block.bn0 = BatchNormLayer<T>::make(out_ch);
      block.conv1 = Conv2dLayer<T>::make(out_ch, out_ch, cfg_.conv_kernel, 2, cfg_.conv_kernel / 2);
      block.bn1 = BatchNormLayer<T>::make(out_ch);
      blocks_.push_back(std::move(block));
      in_ch = out_ch;
    }
    for (const auto& s : cfg_.scales) {
      const int ch = cfg_.conv_channels[static_cast<size_t>(s.block_index)];
      modelers_.push_back(Conv2dLayer<T>::make(ch, 6, 1, s.modeler_stride, 0));
    }
    const int last = cfg_.n_blocks() - 1;
    const int flat = cfg_.conv_channels[static_cast<size_t>(last)] * cfg_.block_side(last) *
                     cfg_.block_side(last);
    bg_fc0_ = DenseLayer<T>::make(flat, cfg_.bg_hidden);
    bg_fc1_ = DenseLayer<T>::make(cfg_.bg_hidden, 3);
    for (const auto& s : cfg_.scales) {
      blobs_.push_back(render_blob<T>({cfg_.sharpness, cfg_.image_side}, s.spacing));
    }
    gates_.assign(cfg_.scales.size(), T{1});
  }

  const AsrConfig& config() const { return cfg_; }

  std::vector<T>& gates() { return gates_; }
  const std::vector<T>& gates() const { return gates_; }

  // z_j for every block plus background color [N,3].
  std::pair<std::vector<Tensor<T>>, Tensor<T>> encode(const Tensor<T>& images, bool train) {
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_side ||
        images.dim(3) != cfg_.image_side) {
      throw DimensionError(str_format("encode: expected [N,3,%d,%d], got %s", cfg_.image_side,
                                      cfg_.image_side, shape_str(images.shape()).c_str()));
    }
    std::vector<Tensor<T>> latents;
    Tensor<T> x = images;
    for (auto& block : blocks_) {
      x = block.bn0.forward(relu(block.conv0.forward(x)), train);
      x = block.bn1.forward(relu(block.conv1.forward(x)), train);
      latents.push_back(x);
    }
    auto flat = reshape_copy(x, {x.dim(0), x.numel() / x.dim(0)});
    auto bg = sigmoid(bg_fc1_.forward(relu(bg_fc0_.forward(flat))));
    return {latents, bg};
  }

  // Mapped ellipse parameters [N,6,gh,gw] for one scale.
  Tensor<T> model_scale(const Tensor<T>& z, int scale_idx, T gate) {
    if (gate < T{0} || gate > T{1}) {
      throw ContractError(str_format("model_scale: gate %g outside [0,1]",
                                     static_cast<double>(gate)));
    }
    const ScaleSpec& s = cfg_.scales[static_cast<size_t>(scale_idx)];
    auto raw = modelers_[static_cast<size_t>(scale_idx)].forward(z);
    if (raw.dim(2) != s.grid_h || raw.dim(3) != s.grid_w) {
      throw ConfigError(str_format("model_scale: got %lldx%lld grid, expected %dx%d",
                                   static_cast<long long>(raw.dim(2)),
                                   static_cast<long long>(raw.dim(3)), s.grid_h, s.grid_w));
    }
    return map_modeler_outputs(sigmoid(raw), gate);
  }

  struct ForwardResult {
    Tensor<T> reconstruction;            // [N,3,side,side]
    std::vector<Tensor<T>> scale_params; // mapped, [N,6,gh,gw] per scale
    Tensor<T> bg;                        // [N,3]
  };

  ForwardResult forward(const Tensor<T>& images, bool train) {
    auto [latents, bg] = encode(images, train);
    std::vector<Tensor<T>> params;
    std::vector<ScaleConfig> rscales;
    for (int j = 0; j < cfg_.n_scales(); ++j) {
      const ScaleSpec& s = cfg_.scales[static_cast<size_t>(j)];
      params.push_back(model_scale(latents[static_cast<size_t>(s.block_index)], j,
                                   gates_[static_cast<size_t>(j)]));
      rscales.push_back({s.grid_h, s.grid_w, s.spacing});
    }
    RenderConfig rc{cfg_.sharpness, cfg_.image_side};
    auto recon = render_scene(params, bg, rscales, rc, &blobs_);
    return {recon, params, bg};
  }

  std::vector<NamedTensor<T>> parameters() {
    std::vector<NamedTensor<T>> out;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "encoder.block" + std::to_string(b);
      out.push_back({p + ".conv0.weight", blocks_[b].conv0.w});
      out.push_back({p + ".conv0.bias", blocks_[b].conv0.b});
      out.push_back({p + ".bn0.gamma", blocks_[b].bn0.gamma});
      out.push_back({p + ".bn0.beta", blocks_[b].bn0.beta});
      out.push_back({p + ".conv1.weight", blocks_[b].conv1.w});
      out.push_back({p + ".conv1.bias", blocks_[b].conv1.b});
      out.push_back({p + ".bn1.gamma", blocks_[b].bn1.gamma});
      out.push_back({p + ".bn1.beta", blocks_[b].bn1.beta});
    }
    for (size_t j = 0; j < modelers_.size(); ++j) {
      const std::string p = "modeler" + std::to_string(j);
      out.push_back({p + ".weight", modelers_[j].w});
      out.push_back({p + ".bias", modelers_[j].b});
    }
    out.push_back({"background.fc0.weight", bg_fc0_.w});
    out.push_back({"background.fc0.bias", bg_fc0_.b});
    out.push_back({"background.fc1.weight", bg_fc1_.w});
    out.push_back({"background.fc1.bias", bg_fc1_.b});
    return out;
  }

  std::vector<NamedTensor<T>> buffers() {
    std::vector<NamedTensor<T>> out;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "encoder.block" + std::to_string(b);
      out.push_back({p + ".bn0.running_mean", blocks_[b].bn0.running_mean});
      out.push_back({p + ".bn0.running_var", blocks_[b].bn0.running_var});
      out.push_back({p + ".bn1.running_mean", blocks_[b].bn1.running_mean});
      out.push_back({p + ".bn1.running_var", blocks_[b].bn1.running_var});
    }
    return out;
  }

  // Xavier-uniform weights everywhere; ConvBlock and Modeler biases drawn
  // from N(0,1); BackgroundBlock biases set to one so the background takes
  // part in rendering from the start.
  void init_parameters(uint64_t seed) {
    auto rng = make_rng(seed);
    for (auto& block : blocks_) {
      for (Conv2dLayer<T>* conv : {&block.conv0, &block.conv1}) {
        xavier_uniform(conv->w, conv->fan_in(), conv->fan_out(), rng);
        normal_init(conv->b, 0.0, 1.0, rng);
      }
      for (BatchNormLayer<T>* bn : {&block.bn0, &block.bn1}) {
        constant_init(bn->gamma, T{1});
        constant_init(bn->beta, T{0});
        constant_init(bn->running_mean, T{0});
        constant_init(bn->running_var, T{1});
      }
    }
    for (auto& m : modelers_) {
      xavier_uniform(m.w, m.fan_in(), m.fan_out(), rng);
      normal_init(m.b, 0.0, 1.0, rng);
    }
    for (DenseLayer<T>* fc : {&bg_fc0_, &bg_fc1_}) {
      xavier_uniform(fc->w, fc->w.dim(0), fc->w.dim(1), rng);
      constant_init(fc->b, T{1});
    }
  }

 private:
  AsrConfig cfg_;
  std::vector<ConvBlock> blocks_;
  std::vector<Conv2dLayer<T>> modelers_;
  DenseLayer<T> bg_fc0_, bg_fc1_;
  std::vector<Tensor<T>> blobs_;
  std::vector<T> gates_;
};

// ---------------------------------------------------------------------------
// Structured latent (plain values, feature extraction and round-tripping)
// ---------------------------------------------------------------------------

template <typename T>
struct StructuredLatent {
  std::vector<std::vector<EllipseParams<T>>> scales;  // row-major cells per scale
  std::array<T, 3> bg{};

  // scale-major, cell row-major, (w,h,d,ar,ag,ab); background excluded
  std::vector<T> to_flat() const {
    std::vector<T> flat;
    for (const auto& cells : scales) {
      for (const auto& e : cells) {
        flat.push_back(e.w);
        flat.push_back(e.h);
        flat.push_back(e.d);
        flat.push_back(e.a[0]);
        flat.push_back(e.a[1]);
        flat.push_back(e.a[2]);
      }
    }
    return flat;
  }

  static StructuredLatent from_flat(const std::vector<T>& flat,
                                    const std::vector<int>& cells_per_scale,
                                    std::array<T, 3> bg) {
    int64_t total = 0;
    for (int c : cells_per_scale) total += c;
    if (static_cast<int64_t>(flat.size()) != 6 * total) {
      throw ContractError("structured latent: flat size does not match scale grids");
    }
    StructuredLatent out;
    out.bg = bg;
    size_t k = 0;
    for (int c : cells_per_scale) {
      std::vector<EllipseParams<T>> cells(static_cast<size_t>(c));
      for (auto& e : cells) {
        e.w = flat[k++];
        e.h = flat[k++];
        e.d = flat[k++];
        e.a[0] = flat[k++];
        e.a[1] = flat[k++];
        e.a[2] = flat[k++];
      }
      out.scales.push_back(std::move(cells));
    }
    return out;
  }
};

// Reads one image's latent out of the batched forward result.
template <typename T>
StructuredLatent<T> extract_latent(const std::vector<Tensor<T>>& scale_params,
                                   const Tensor<T>& bg, int64_t n) {
  StructuredLatent<T> out;
  for (const auto& p : scale_params) {
    const int64_t cells = p.dim(2) * p.dim(3);
    const T* base = p.data() + n * 6 * cells;
    std::vector<EllipseParams<T>> es(static_cast<size_t>(cells));
    for (int64_t i = 0; i < cells; ++i) {
      es[static_cast<size_t>(i)] = {base[0 * cells + i], base[1 * cells + i],
                                    base[2 * cells + i],
                                    {base[3 * cells + i], base[4 * cells + i],
                                     base[5 * cells + i]}};
    }
    out.scales.push_back(std::move(es));
  }
  out.bg = {bg.data()[n * 3], bg.data()[n * 3 + 1], bg.data()[n * 3 + 2]};
  return out;
}

// ---------------------------------------------------------------------------
// Baseline autoencoder
// ---------------------------------------------------------------------------

struct BaselineConfig {
  int image_side = 256;
  std::vector<int> enc_channels = {16, 32, 64, 128, 128};
  int latent_dim = 200;

  int bottleneck_side() const {
    int side = image_side;
    for (size_t i = 0; i < enc_channels.size(); ++i) side /= 2;
    return side;
  }
};

template <typename T>
class BaselineModel {
 public:
  struct EncBlock {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
  };
  struct DecBlock {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
  };

  explicit BaselineModel(BaselineConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.bottleneck_side() < 1) throw ConfigError("baseline: too many blocks for image side");
    int in_ch = 3;
    for (int ch : cfg_.enc_channels) {
      EncBlock b;
      b.conv = Conv2dLayer<T>::make(in_ch, ch, 3, 1, 1);
      b.bn = BatchNormLayer<T>::make(ch);
      enc_.push_back(std::move(b));
      in_ch = ch;
    }
    const int bs = cfg_.bottleneck_side();
    const int flat = cfg_.enc_channels.back() * bs * bs;
    to_latent_ = DenseLayer<T>::make(flat, cfg_.latent_dim);
    from_latent_ = DenseLayer<T>::make(cfg_.latent_dim, flat);
    std::vector<int> dec_channels(cfg_.enc_channels.rbegin(), cfg_.enc_channels.rend());
    dec_channels.push_back(dec_channels.back());  // final upsample keeps width
    for (size_t i = 0; i + 1 < dec_channels.size(); ++i) {
      DecBlock b;
      b.conv = Conv2dLayer<T>::make(dec_channels[i], dec_channels[i + 1], 3, 1, 1);
      b.bn = BatchNormLayer<T>::make(dec_channels[i + 1]);
      dec_.push_back(std::move(b));
    }
    out_conv_ = Conv2dLayer<T>::make(dec_channels.back(), 3, 3, 1, 1);
  }

  const BaselineConfig& config() const { return cfg_; }

  Tensor<T> encode(const Tensor<T>& images, bool train) {
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_side) {
      throw DimensionError("baseline encode: expected [N,3,side,side]");
    }
    Tensor<T> x = images;
    for (auto& b : enc_) {
      x = maxpool2d(b.bn.forward(elu(b.conv.forward(x)), train), 2, 2);
    }
    auto flat = reshape_copy(x, {x.dim(0), x.numel() / x.dim(0)});
    return to_latent_.forward(flat);
  }

  Tensor<T> decode(const Tensor<T>& latent, bool train) {
    const int bs = cfg_.bottleneck_side();
    auto x = reshape_copy(from_latent_.forward(latent),
                          {latent.dim(0), cfg_.enc_channels.back(), bs, bs});
    for (auto& b : dec_) {
      x = b.bn.forward(elu(b.conv.forward(upsample_nearest_2x(x))), train);
    }
    return sigmoid(out_conv_.forward(x));
  }

  Tensor<T> forward(const Tensor<T>& images, bool train) {
    return decode(encode(images, train), train);
  }

  std::vector<NamedTensor<T>> parameters() {
    std::vector<NamedTensor<T>> out;
    for (size_t i = 0; i < enc_.size(); ++i) {
      const std::string p = "enc.block" + std::to_string(i);
      out.push_back({p + ".conv.weight", enc_[i].conv.w});
      out.push_back({p + ".conv.bias", enc_[i].conv.b});
      out.push_back({p + ".bn.gamma", enc_[i].bn.gamma});
      out.push_back({p + ".bn.beta", enc_[i].bn.beta});
    }
    out.push_back({"to_latent.weight", to_latent_.w});
    out.push_back({"to_latent.bias", to_latent_.b});
    out.push_back({"from_latent.weight", from_latent_.w});
    out.push_back({"from_latent.bias", from_latent_.b});
    for (size_t i = 0; i < dec_.size(); ++i) {
      const std::string p = "dec.block" + std::to_string(i);
      out.push_back({p + ".conv.weight", dec_[i].conv.w});
      out.push_back({p + ".conv.bias", dec_[i].conv.b});
      out.push_back({p + ".bn.gamma", dec_[i].bn.gamma});
      out.push_back({p + ".bn.beta", dec_[i].bn.beta});
    }
    out.push_back({"out_conv.weight", out_conv_.w});
    out.push_back({"out_conv.bias", out_conv_.b});
    return out;
  }

  std::vector<NamedTensor<T>> buffers() {
    std::vector<NamedTensor<T>> out;
    for (size_t i = 0; i < enc_.size(); ++i) {
      const std::string p = "enc.block" + std::to_string(i);
      out.push_back({p + ".bn.running_mean", enc_[i].bn.running_mean});
      out.push_back({p + ".bn.running_var", enc_[i].bn.running_var});
    }
    for (size_t i = 0; i < dec_.size(); ++i) {
      const std::string p = "dec.block" + std::to_string(i);
      out.push_back({p + ".bn.running_mean", dec_[i].bn.running_mean});
      out.push_back({p + ".bn.running_var", dec_[i].bn.running_var});
    }
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void init_parameters(uint64_t seed) {
    auto rng = make_rng(seed);
    auto init_conv = [&rng](Conv2dLayer<T>& c) {
      xavier_uniform(c.w, c.fan_in(), c.fan_out(), rng);
      constant_init(c.b, T{0});
    };
    for (auto& b : enc_) {
      init_conv(b.conv);
      constant_init(b.bn.gamma, T{1});
      constant_init(b.bn.beta, T{0});
      constant_init(b.bn.running_mean, T{0});
      constant_init(b.bn.running_var, T{1});
    }
    xavier_uniform(to_latent_.w, to_latent_.w.dim(0), to_latent_.w.dim(1), rng);
    constant_init(to_latent_.b, T{0});
    xavier_uniform(from_latent_.w, from_latent_.w.dim(0), from_latent_.w.dim(1), rng);
    constant_init(from_latent_.b, T{0});
    for (auto& b : dec_) {
      init_conv(b.conv);
      constant_init(b.bn.gamma, T{1});
      constant_init(b.bn.beta, T{0});
      constant_init(b.bn.running_mean, T{0});
      constant_init(b.bn.running_var, T{1});
    }
    init_conv(out_conv_);
  }

 private:
  BaselineConfig cfg_;
  std::vector<EncBlock> enc_;
  DenseLayer<T> to_latent_, from_latent_;
  std::vector<DecBlock> dec_;
  Conv2dLayer<T> out_conv_;
};

}  // namespace asr
