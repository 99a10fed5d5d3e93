// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "bdkit/core/types.hpp"
#include "bdkit/data/dataset.hpp"

namespace bdkit::data {

/// Replaces the trigger footprint of a (C,H,W) image with the pattern. Input is untouched.
nn::Tensor stamp_trigger(const nn::Tensor& image, const Trigger& trigger);
/// Same as stamp_trigger, in place on every image of an (N,C,H,W) batch.
void stamp_batch_inplace(nn::Tensor& batch, const Trigger& trigger);

/// floor(ratio * N) examples drawn uniformly without replacement, in draw order.
LabeledDataset sample_clean_subset(const LabeledDataset& dataset, double ratio, std::uint64_t seed);
/// Index form of the same draw, so callers can reproduce the subset without images.
std::vector<std::size_t> sample_subset_indices(std::size_t n, double ratio, std::uint64_t seed);

struct BasslPoisonSet {
  LabeledDataset dataset;
  /// Positions (into the migrated list) that were trigger-stamped, ascending.
  std::vector<std::size_t> stamped;
  /// Indices into downstream_target_images that were migrated, in insertion order.
  std::vector<std::size_t> migrated;
};

/// Appends ceil(migration_fraction * n) target-class images to the pre-training set and
/// stamps ceil(poison_ratio * migrated) of them. Inserted images carry label 0; the
/// contrastive objective never reads labels.
BasslPoisonSet build_bassl_poison_set(const LabeledDataset& pretrain_set, const AttackSpec& spec,
                                      const std::vector<nn::Tensor>& downstream_target_images, std::uint64_t seed);

/// Trigger-stamped view over a TEST split. Images are stamped on access.
class PoisonedEvalSet {
 public:
  PoisonedEvalSet(std::shared_ptr<const LabeledDataset> base, Trigger trigger, int target_class);

  std::size_t size() const { return base_->size(); }
  const LabeledDataset& base() const { return *base_; }
  const Trigger& trigger() const { return trigger_; }
  int target_class() const { return target_class_; }

  nn::Tensor image(std::size_t i) const;
  nn::Tensor batch(std::span<const std::size_t> indices) const;
  LabeledDataset materialize() const;

 private:
  std::shared_ptr<const LabeledDataset> base_;
  Trigger trigger_;
  int target_class_;
};

/// Throws ValidationError("split") unless test_set is the TEST split.
PoisonedEvalSet make_poisoned_eval_set(std::shared_ptr<const LabeledDataset> test_set, const AttackSpec& spec);

}  // namespace bdkit::data
