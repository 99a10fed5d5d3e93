// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bdkit/core/config.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::distill {

/// Teacher and student activations for one batch. Teacher entries are constants.
struct DistillBatchView {
  std::vector<nn::Var> teacher_taps;  // (B,C,H,W) each
  nn::Var teacher_embedding;          // (B,D)
  std::vector<nn::Var> student_taps;
  nn::Var student_embedding;

  std::size_t batch_size() const { return student_embedding.dim(0); }
  /// Tap counts and every shape must agree -> else ValidationError.
  void validate() const;
};

struct AttentionMap {
  nn::Tensor values;  // (B,H,W), >= 0
  double p = 2.0;
};

/// values[b,h,w] = sum_c |tap[b,c,h,w]|^p. p < 1 -> ValidationError.
AttentionMap attention_map(const nn::Tensor& tap, double p);

nn::Var loss_fitnets(const DistillBatchView& view);
nn::Var loss_cc(const DistillBatchView& view);
nn::Var loss_atd(const DistillBatchView& view, double p);
nn::Var loss_afd(const DistillBatchView& view, double p);
nn::Var loss_sp(const DistillBatchView& view);
nn::Var loss_kd(const DistillBatchView& view, double temperature, bool include_taps = true);

/// Per-tap AFD weights: softmax over each tap's share of the total teacher
/// attention mass (mean attention per position). If any tap carries less than
/// 1e-12 mass the weights fall back to uniform.
std::vector<double> afd_tap_weights(const std::vector<nn::Tensor>& teacher_taps, double p);

/// Dispatches on kind using the attention order / temperature / KD flag in hparams.
nn::Var distill_loss(LossKind kind, const DistillBatchView& view, const DistillHParams& hparams);

/// RAW copies the poisoned encoder, VOID is a fresh seeded initialization, WARMUP
/// is warm-up contrastive training on the clean subset from that same initialization.
pretrain::Encoder init_student(StudentStrategy strategy, const pretrain::Encoder& poisoned,
                               const data::LabeledDataset& clean_subset, const PretrainHParams& warmup,
                               std::uint64_t seed);

/// Trains the student to match the frozen teacher on the clean subset. The teacher
/// runs with eval-mode normalization, the student in training mode. Every step
/// feeds one augmented view of the batch to both. The per-epoch loss trace is
/// stored in metadata["loss_trace"], lineage in metadata["distill"].
pretrain::Encoder distill(const pretrain::Encoder& teacher, const pretrain::Encoder& student,
                          const data::LabeledDataset& clean_subset, LossKind loss_kind, std::size_t epochs,
                          const OptimizerHParams& optimizer, const DistillHParams& hparams, std::uint64_t seed);

struct Iteration {
  std::size_t index = 0;
  pretrain::Encoder teacher;
  pretrain::Encoder student;
};

/// Per-stage seed of an iteration: derive_seed(root, stage) for iteration 0 (the
/// single-shot pipeline), derive_seed(root, "iteration/<n>/<stage>") after that.
std::uint64_t iteration_seed(std::uint64_t root, const std::string& stage, std::size_t iteration);

/// Iteration 0: FT(poisoned) teaches a student built with config.student_strategy
/// (WARMUP in the iterative protocol). Iteration n >= 1: FT(stu^(n-1))
/// teaches a student initialized from stu^(n-1). Teachers record their parent hash.
/// on_iteration (optional) sees each iteration as soon as it finishes.
std::vector<Iteration> iterative_distill(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                         const ExperimentConfig& config, std::size_t n_iterations,
                                         const std::function<void(const Iteration&)>& on_iteration = nullptr);

}  // namespace bdkit::distill
