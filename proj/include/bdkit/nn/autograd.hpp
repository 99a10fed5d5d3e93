// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-free reverse-mode autodiff over Tensor. Each op returns a Var whose
// node remembers its inputs and a closure that pushes the output gradient back.
// Nodes that do not depend on any trainable leaf carry no closure.
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "bdkit/nn/tensor.hpp"

namespace bdkit::nn {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  /// Lazily allocates a zero gradient with the value's shape.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an op output. The closure is dropped if no input requires grad.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

 private:
  std::shared_ptr<Node> node_;
};

/// Runs reverse accumulation from a scalar. Leaf gradients accumulate, so callers
/// zero them between steps.
void backward(const Var& scalar);

}  // namespace bdkit::nn
