// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "bdkit/core/config.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::attack {

struct BadEncoderHParams {
  /// Images of the target class whose embeddings the trigger should mimic, (K,C,H,W).
  nn::Tensor reference_inputs;
  double lambda_effect = 1.0;
  double lambda_utility = 1.0;
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
};

struct BadEncoderTerms {
  nn::Var total;
  nn::Var effect;   // 1 - mean cos(f(x+trigger), f(reference)), unweighted
  nn::Var utility;  // 1 - mean cos(f(x), f_clean(x)), unweighted
};

/// lambda_e * effect + lambda_u * utility with cosine similarities. The poisoned
/// encoder runs in eval mode (BatchNorm uses running statistics); frozen_clean is constant.
/// Zero-norm embeddings -> NumericalError.
BadEncoderTerms badencoder_terms(pretrain::Encoder& poisoned, const pretrain::Encoder& frozen_clean,
                                 const nn::Tensor& shadow_batch, const Trigger& trigger,
                                 const nn::Tensor& reference_inputs, double lambda_effect = 1.0,
                                 double lambda_utility = 1.0);
nn::Var badencoder_loss(pretrain::Encoder& poisoned, const pretrain::Encoder& frozen_clean,
                        const nn::Tensor& shadow_batch, const Trigger& trigger, const nn::Tensor& reference_inputs,
                        double lambda_effect = 1.0, double lambda_utility = 1.0);

/// Fine-tunes a copy of the clean encoder to minimize badencoder_loss over the shadow set.
/// metadata gets effect_initial / effect_final (full shadow set) and the attack manifest.
pretrain::Encoder badencoder_poison(const pretrain::Encoder& clean, const AttackSpec& spec,
                                    const data::LabeledDataset& shadow_set, const BadEncoderHParams& hparams,
                                    std::uint64_t seed);

/// build_bassl_poison_set followed by contrastive_pretrain.
pretrain::Encoder bassl_poison(const data::LabeledDataset& pretrain_set, const AttackSpec& spec,
                               const std::vector<nn::Tensor>& downstream_target_images,
                               const std::string& architecture, const PretrainHParams& hparams, std::uint64_t seed);

/// Record needed to evaluate ASR later: trigger hash, geometry, target, strengths.
nlohmann::json attack_manifest(const AttackSpec& spec);
std::string trigger_hash(const Trigger& trigger);

/// Deterministic choice of `count` reference images from the target class.
nn::Tensor pick_reference_inputs(const data::LabeledDataset& downstream_train, int target_class, std::size_t count,
                                 std::uint64_t seed);

}  // namespace bdkit::attack
