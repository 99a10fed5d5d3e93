// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bdkit/core/config.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::teacher {

struct TriggerEstimate {
  nn::Tensor pattern;  // (C,H,W) in [0,1]
  nn::Tensor mask;     // (H,W) in [0,1]
  /// Best objective so far after each step (index 0 = initialization); non-decreasing.
  std::vector<double> inversion_loss_trace;

  void save(const std::filesystem::path& dir) const;  // pattern.bin, mask.bin, trace.csv
  static TriggerEstimate load(const std::filesystem::path& dir);
};

/// Fine-tuning schedule of the FT/FP/ANP teachers: teacher.finetune_* with the
/// pre-training temperature and augmentation, optimizer.batch_size.
PretrainHParams finetune_hparams(const ExperimentConfig& config);
/// As finetune_hparams with teacher.unlearn_epochs.
PretrainHParams unlearn_hparams(const ExperimentConfig& config);

/// Builds the configured teacher; NONE returns the poisoned encoder unchanged (tagged NONE).
pretrain::Encoder make_teacher(TeacherMethod method, const pretrain::Encoder& poisoned,
                               const data::LabeledDataset& clean_subset, const ExperimentConfig& config,
                               std::uint64_t seed);

/// Continued contrastive training on the clean subset; lineage T-FT.
pretrain::Encoder make_teacher_ft(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                  const PretrainHParams& finetune, std::uint64_t seed);

/// Mean |activation| per channel of the last tap over the data (eval mode).
std::vector<double> channel_activity(const pretrain::Encoder& encoder, const data::LabeledDataset& data);

/// Indices of the floor(fraction * C) channels to prune, highest score first for
/// MOST_ACTIVE (lowest first for LEAST_ACTIVE); ties go to the lowest channel index.
std::vector<std::size_t> select_channels(const std::vector<double>& scores, double fraction, PruneDirection direction);

/// Prunes last-tap channels ranked by clean activity, then fine-tunes; lineage T-FP.
pretrain::Encoder make_teacher_fp(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                  double prune_fraction, PruneDirection direction, const PretrainHParams& finetune,
                                  std::uint64_t seed);

/// Per-tap channel sensitivity: loss increase predicted for a sign-of-gradient
/// perturbation of the channel scale by `budget`, averaged over `batches` contrastive
/// batches. Scores below 1e-12 are reported as exactly 0.
std::vector<std::vector<double>> anp_sensitivity(const pretrain::Encoder& encoder,
                                                 const data::LabeledDataset& clean_subset, double budget,
                                                 std::size_t batches, const PretrainHParams& hparams,
                                                 std::uint64_t seed);

/// Prunes the most perturbation-sensitive prune_fraction of each tap, then fine-tunes; lineage T-ANP.
pretrain::Encoder make_teacher_anp(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                   double perturb_budget, double prune_fraction, std::size_t batches,
                                   const PretrainHParams& finetune, std::uint64_t seed);

struct InversionOptions {
  std::size_t steps = 200;
  double learning_rate = 0.1;
  double mask_l1_weight = 1e-3;
  /// Images used per objective evaluation (a fixed, seeded slice of the clean subset).
  std::size_t batch_size = 128;
};

/// Maximizes mean pairwise cosine of embeddings of blended clean samples minus
/// mask_l1_weight * sum(mask). Mask and pattern are sigmoid-parameterized, starting
/// at mask 0.5 and gray pattern 0.5; the best iterate is returned.
/// trigger_shape must equal the image (H,W): the mask spans the full image.
TriggerEstimate invert_trigger(const pretrain::Encoder& encoder, const data::LabeledDataset& clean_subset,
                               std::array<std::size_t, 2> trigger_shape, const InversionOptions& options,
                               std::uint64_t seed);

/// Mean pairwise cosine of embeddings of (1 - m) * x + m * pattern.
double blended_pairwise_cosine(const pretrain::Encoder& encoder, const nn::Tensor& images,
                               const TriggerEstimate& estimate);
/// Mean cosine between embeddings of blended and clean images.
double blended_clean_cosine(const pretrain::Encoder& encoder, const nn::Tensor& images,
                            const TriggerEstimate& estimate);

/// Contrastive fine-tuning plus an unlearning term 1 - mean cos(f(blend(x)), sg f(x)); lineage T-MOTH.
pretrain::Encoder make_teacher_moth(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                    const TriggerEstimate& estimate, const PretrainHParams& unlearn,
                                    std::uint64_t seed);

}  // namespace bdkit::teacher
