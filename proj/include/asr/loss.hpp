#pragma once

// Reconstruction and regularization losses. MMSE ignores a fixed image
// margin; ARV penalizes total primitive absorption, weighted per scale and
// averaged over grid locations.

#include <vector>

#include "asr/ops.hpp"

namespace asr {

enum class ArvNormalizer { Locations, Variables };
enum class ArvChannelReduction { PowSum, NormPow };

struct LossConfig {
  int margin = 16;
  double lambda_a = 0.009;
  double alpha = 0.75;  // constrained to (0.5, 1.0)
  std::vector<double> scale_weights = {0.6, 0.9, 1.2};
  ArvNormalizer normalizer = ArvNormalizer::Locations;
  ArvChannelReduction channel_reduction = ArvChannelReduction::PowSum;

  void validate(int image_side) const {
    if (margin < 0 || 2 * margin >= image_side) {
      throw ConfigError(str_format("loss: margin %d does not leave an interior in side %d",
                                   margin, image_side));
    }
    if (!(alpha > 0.5 && alpha < 1.0)) {
      throw ConfigError(str_format("loss: alpha %g must lie strictly inside (0.5, 1.0)", alpha));
    }
  }
};

// Mean squared error over the interior (side - 2*margin)^2 pixels of all
// channels, averaged over the batch.
template <typename T>
Tensor<T> mmse(const Tensor<T>& y, const Tensor<T>& yhat, int margin) {
  detail::check_same_shape("mmse", y, yhat);
  const int64_t H = y.dim(y.ndim() - 2), W = y.dim(y.ndim() - 1);
  if (margin < 0 || 2 * margin >= H || 2 * margin >= W) {
    throw ConfigError(str_format("mmse: margin %d too large for %lldx%lld images", margin,
                                 static_cast<long long>(H), static_cast<long long>(W)));
  }
  auto yc = crop_hw(y, margin, margin, H - 2 * margin, W - 2 * margin);
  auto rc = crop_hw(yhat, margin, margin, H - 2 * margin, W - 2 * margin);
  auto d = sub(yc, rc);
  return mean_all(mul(d, d));
}

// Appearance Regularization Value over the batch:
//   (1/|locations|) * sum_j sum_l w_j * sum_c a[j,l,c]^alpha
// averaged over images. scale_params[j] is the mapped [N,6,gh,gw] tensor;
// appearance lives in channels 3..5.
template <typename T>
Tensor<T> arv(const std::vector<Tensor<T>>& scale_params, const LossConfig& cfg) {
  if (scale_params.empty()) throw ContractError("arv: no scales");
  if (cfg.scale_weights.size() < scale_params.size()) {
    throw ConfigError("arv: fewer scale weights than scales");
  }
  int64_t total_locations = 0;
  const int64_t N = scale_params.front().dim(0);
  Tensor<T> acc;
  for (size_t j = 0; j < scale_params.size(); ++j) {
    const auto& p = scale_params[j];
    total_locations += p.dim(2) * p.dim(3);
    auto a = slice_channels(p, 3, 3);
    {
      const T* av = a.data();
      for (int64_t i = 0; i < a.numel(); ++i) {
        if (av[i] < T{0} || av[i] > T{1}) {
          throw ContractError(str_format("arv: appearance value %g outside [0,1]",
                                         static_cast<double>(av[i])));
        }
      }
    }
    Tensor<T> per_scale;
    if (cfg.channel_reduction == ArvChannelReduction::PowSum) {
      per_scale = sum_all(pow_scalar(a, static_cast<T>(cfg.alpha)));
    } else {
      // ||a||^alpha per location: (sum_c a_c^2)^(alpha/2)
      auto sq = mul(a, a);
      auto s = add(add(slice_channels(sq, 0, 1), slice_channels(sq, 1, 1)),
                   slice_channels(sq, 2, 1));
      per_scale = sum_all(pow_scalar(s, static_cast<T>(cfg.alpha / 2.0)));
    }
    auto weighted = scalar_mul(per_scale, static_cast<T>(cfg.scale_weights[j]));
    acc = acc.valid() ? add(acc, weighted) : weighted;
  }
  const int64_t denom_unit = cfg.normalizer == ArvNormalizer::Locations
                                 ? total_locations
                                 : 6 * total_locations;
  return scalar_mul(acc, static_cast<T>(1.0 / (static_cast<double>(denom_unit) *
                                               static_cast<double>(N))));
}

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> mmse;
  Tensor<T> arv;  // invalid handle when regularization is off
};

template <typename T>
LossParts<T> total_loss(const Tensor<T>& y, const Tensor<T>& yhat,
                        const std::vector<Tensor<T>>& scale_params, const LossConfig& cfg,
                        bool reg_active) {
  LossParts<T> parts;
  parts.mmse = mmse(y, yhat, cfg.margin);
  if (reg_active) {
    parts.arv = arv(scale_params, cfg);
    parts.total = add(parts.mmse, scalar_mul(parts.arv, static_cast<T>(cfg.lambda_a)));
  } else {
    parts.total = parts.mmse;
  }
  return parts;
}

}  // namespace asr
