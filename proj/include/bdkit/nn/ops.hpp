// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "bdkit/nn/autograd.hpp"

namespace bdkit::nn {

// Norms below this are treated as zero by the guarded normalizations.
inline constexpr double kNormEpsilon = 1e-12;

// Elementwise, operands of identical shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var abs_pow(const Var& a, double p);  // |a|^p
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
/// sqrt with zero gradient at 0 (the subgradient of a norm at its kink).
Var sqrt_guarded(const Var& a);

Var reshape(const Var& a, Shape shape);
Var flatten(const Var& a);  // (B, ...) -> (B, rest)

Var sum(const Var& a);   // scalar
Var mean(const Var& a);  // scalar
Var row_sum(const Var& a);  // (B,D) -> (B)
Var add_all(const std::vector<Var>& terms);  // scalar terms

// Matrix ops on rank-2 tensors.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var linear(const Var& x, const Var& weight, const Var& bias);  // x (B,D), weight (O,D), bias (O)
Var concat_rows(const Var& a, const Var& b);
Var select_rows(const Var& a, const std::vector<std::size_t>& rows);
/// Divides each row by its L2 norm; rows with norm < kNormEpsilon pass through unchanged.
Var l2_normalize_rows(const Var& x);
/// Row L2 norms (B,D) -> (B), zero gradient for zero rows.
Var row_norm(const Var& x);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
/// Mean cross-entropy of logits (B,K) against integer labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Image ops, NCHW layout.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad);
Var avg_pool2d(const Var& x, std::size_t k);
Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C)
/// Multiplies channel c of x (B,C,...) by s[c].
Var channel_scale(const Var& x, const Var& s);
/// sum_c |x[b,c,h,w]|^p -> (B,H,W)
Var channel_abs_pow_sum(const Var& x, double p);
/// (1 - m) * x + m * pattern, broadcasting m (H,W) and pattern (C,H,W) over the batch.
Var blend(const Var& x, const Var& mask, const Var& pattern);
Var sigmoid(const Var& a);

struct BatchNormBuffers {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
};

/// Training mode normalizes with batch statistics and, if buffers are given,
/// updates the running estimates. Eval mode uses the running estimates.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                 const Tensor& running_var, bool training, BatchNormBuffers update = {});

}  // namespace bdkit::nn
