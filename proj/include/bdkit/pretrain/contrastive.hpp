// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bdkit/core/config.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::pretrain {

/// NT-Xent over the 2B views (a_i, b_i are positives). Each row's softmax runs over
/// the 2B-1 non-self candidates. Rows are L2-normalized first.
/// B < 2 -> BatchTooSmallError; temperature <= 0 -> ValidationError.
nn::Var nt_xent_loss(const nn::Var& embeddings_a, const nn::Var& embeddings_b, double temperature);

/// Seeded random initialization shared by VOID students and warm-up training.
Encoder initial_encoder(const std::string& architecture, std::uint64_t seed);

/// Extra loss terms added to each contrastive step (used by MOTH unlearning).
using ContrastiveExtra = std::function<nn::Var(Encoder&, const nn::Tensor& clean_batch)>;

/// Continues contrastive training of all encoder parameters in place. Returns the
/// per-epoch mean loss. Non-finite loss -> TrainingError(stage, epoch).
std::vector<double> contrastive_train(Encoder& encoder, const data::LabeledDataset& dataset,
                                      const PretrainHParams& hparams, std::uint64_t seed, const std::string& stage,
                                      const ContrastiveExtra& extra = nullptr);

/// Fresh encoder trained on the dataset. The loss trace lands in metadata["loss_trace"].
Encoder contrastive_pretrain(const data::LabeledDataset& dataset, const std::string& architecture,
                             const PretrainHParams& hparams, std::uint64_t seed);

/// contrastive_pretrain on the defender's clean subset, tagged strategy=WARMUP.
Encoder warm_up_train(const data::LabeledDataset& clean_subset, const std::string& architecture,
                      const PretrainHParams& hparams, std::uint64_t seed);

/// Shuffled mini-batch index lists for one epoch; a trailing batch smaller than
/// min_batch is dropped unless it is the only one.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::size_t min_batch,
                                                    Rng& rng);

}  // namespace bdkit::pretrain
