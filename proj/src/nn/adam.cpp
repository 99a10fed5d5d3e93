// SPDX-License-Identifier: Apache-2.0
#include "bdkit/nn/adam.hpp"

#include <cmath>

namespace bdkit::nn {

Adam::Adam(std::span<const Var> params, AdamOptions options) : params_(params.begin(), params.end()), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& node = *params_[k].node();
    if (node.grad.size() != node.value.size()) continue;  // untouched this step
    Tensor& w = node.value;
    const Tensor& g = node.grad;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + options_.weight_decay * w[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * gi;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * gi * gi;
      w[i] -= options_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options_.epsilon);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace bdkit::nn
