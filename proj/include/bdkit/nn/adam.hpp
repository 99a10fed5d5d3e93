// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "bdkit/nn/autograd.hpp"

namespace bdkit::nn {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Adam over a fixed list of leaf Vars. step() consumes and clears their gradients.
class Adam {
 public:
  Adam(std::span<const Var> params, AdamOptions options);

  void step();
  void zero_grad();
  const AdamOptions& options() const noexcept { return options_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  AdamOptions options_;
  long t_ = 0;
};

}  // namespace bdkit::nn
