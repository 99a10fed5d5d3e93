// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "bdkit/core/seed.hpp"
#include "bdkit/nn/tensor.hpp"

namespace bdkit::data {

/// SimCLR-style view sampling. Hue jitter is omitted.
struct AugmentPolicy {
  double crop_scale_min = 0.08;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double flip_probability = 0.5;
  double jitter_probability = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_probability = 0.2;
  bool enabled = true;
};

/// "simclr", "simclr-tiny" (crop scale >= 0.6, for 16x16 images) or "none".
AugmentPolicy augment_policy(const std::string& id);

/// One random view of every image in an (N,C,H,W) batch.
nn::Tensor augment_batch(const nn::Tensor& batch, const AugmentPolicy& policy, Rng& rng);

}  // namespace bdkit::data
