// SPDX-License-Identifier: Apache-2.0
#include "bdkit/data/augment.hpp"

#include <algorithm>
#include <cmath>

#include "bdkit/core/error.hpp"

namespace bdkit::data {

AugmentPolicy augment_policy(const std::string& id) {
  if (id == "simclr") return {};
  if (id == "simclr-tiny") {
    AugmentPolicy p;
    p.crop_scale_min = 0.6;
    return p;
  }
  if (id == "none") {
    AugmentPolicy p;
    p.enabled = false;
    return p;
  }
  throw ValidationError("pretrain.augmentation", "unknown policy '" + id + "' (simclr, simclr-tiny, none)");
}

namespace {

void crop_resize(const double* src, double* dst, std::size_t c, std::size_t h, std::size_t w, double top, double left,
                 double ch, double cw, bool flip) {
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp(top + (static_cast<double>(y) + 0.5) * ch / static_cast<double>(h) - 0.5, 0.0,
                                 static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t ox = flip ? w - 1 - x : x;
      const double fx = std::clamp(left + (static_cast<double>(x) + 0.5) * cw / static_cast<double>(w) - 0.5, 0.0,
                                   static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double* p = src + k * h * w;
        const double top_v = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot_v = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        dst[(k * h + y) * w + ox] = top_v * (1 - wy) + bot_v * wy;
      }
    }
  }
}

void to_gray(double* img, std::size_t c, std::size_t hw) {
  if (c != 3) return;
  for (std::size_t i = 0; i < hw; ++i) {
    const double g = 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i];
    img[i] = img[hw + i] = img[2 * hw + i] = g;
  }
}

}  // namespace

nn::Tensor augment_batch(const nn::Tensor& batch, const AugmentPolicy& policy, Rng& rng) {
  if (!policy.enabled) return batch;
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t hw = h * w, img = c * hw;
  nn::Tensor out(batch.shape());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double area = policy.crop_scale_min + (policy.crop_scale_max - policy.crop_scale_min) * unit(rng);
    const double log_r = std::log(policy.crop_ratio_min) +
                         (std::log(policy.crop_ratio_max) - std::log(policy.crop_ratio_min)) * unit(rng);
    const double ratio = std::exp(log_r);
    const double ch = std::min(static_cast<double>(h), std::sqrt(area / ratio) * static_cast<double>(h));
    const double cw = std::min(static_cast<double>(w), std::sqrt(area * ratio) * static_cast<double>(w));
    const double top = (static_cast<double>(h) - ch) * unit(rng);
    const double left = (static_cast<double>(w) - cw) * unit(rng);
    const bool flip = unit(rng) < policy.flip_probability;
    double* dst = out.data() + i * img;
    crop_resize(batch.data() + i * img, dst, c, h, w, top, left, ch, cw, flip);

    if (unit(rng) < policy.jitter_probability) {
      const double b = 1.0 + policy.brightness * (2 * unit(rng) - 1);
      const double k = 1.0 + policy.contrast * (2 * unit(rng) - 1);
      const double s = 1.0 + policy.saturation * (2 * unit(rng) - 1);
      double mean = 0;
      for (std::size_t j = 0; j < img; ++j) {
        dst[j] = std::clamp(dst[j] * b, 0.0, 1.0);
        mean += dst[j];
      }
      mean /= static_cast<double>(img);
      for (std::size_t j = 0; j < img; ++j) dst[j] = std::clamp((dst[j] - mean) * k + mean, 0.0, 1.0);
      if (c == 3) {
        for (std::size_t j = 0; j < hw; ++j) {
          const double g = 0.299 * dst[j] + 0.587 * dst[hw + j] + 0.114 * dst[2 * hw + j];
          for (std::size_t q = 0; q < 3; ++q) dst[q * hw + j] = std::clamp((dst[q * hw + j] - g) * s + g, 0.0, 1.0);
        }
      }
    }
    if (unit(rng) < policy.grayscale_probability) to_gray(dst, c, hw);
  }
  return out;
}

}  // namespace bdkit::data
