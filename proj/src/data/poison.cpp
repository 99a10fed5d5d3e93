// SPDX-License-Identifier: Apache-2.0
#include "bdkit/data/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"

namespace bdkit::data {

namespace {

// ceil that ignores float noise such as 0.3 * 10 = 3.0000000000000004.
std::size_t ceil_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

// First k entries of a Fisher-Yates pass over 0..n-1; slot i swaps with i + rng() % (n - i).
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

nn::Tensor stamp_trigger(const nn::Tensor& image, const Trigger& trigger) {
  nn::Tensor out = image;
  nn::Tensor batch = out.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  stamp_batch_inplace(batch, trigger);
  return batch.reshaped(image.shape());
}

void stamp_batch_inplace(nn::Tensor& batch, const Trigger& trigger) {
  if (batch.rank() != 4) throw GeometryError("stamp expects (N,C,H,W), got " + nn::to_string(batch.shape()));
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (trigger.channels() != c) {
    throw GeometryError("trigger has " + std::to_string(trigger.channels()) + " channels, image has " +
                        std::to_string(c));
  }
  const auto [r0, c0] = trigger.origin(h, w);
  const std::size_t th = trigger.height(), tw = trigger.width();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x)
          batch[((i * c + ch) * h + r0 + y) * w + c0 + x] = trigger.pattern[(ch * th + y) * tw + x];
}

std::vector<std::size_t> sample_subset_indices(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("clean_data_ratio", "must lie in (0,1]");
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  return draw_without_replacement(n, std::min(k, n), seed);
}

LabeledDataset sample_clean_subset(const LabeledDataset& dataset, double ratio, std::uint64_t seed) {
  const auto idx = sample_subset_indices(dataset.size(), ratio, seed);
  return dataset.subset(idx);
}

BasslPoisonSet build_bassl_poison_set(const LabeledDataset& pretrain_set, const AttackSpec& spec,
                                      const std::vector<nn::Tensor>& downstream_target_images, std::uint64_t seed) {
  if (spec.method != AttackMethod::BASSL) throw ValidationError("attack.method", "expected BASSL");
  const double ratio = spec.bassl.poison_ratio;
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("attack.bassl.poison_ratio", "must lie in (0,1]");
  const double migration = spec.bassl.migration_fraction;
  if (!(migration >= 0.0 && migration <= 1.0)) {
    throw ValidationError("attack.bassl.migration_fraction", "must lie in [0,1]");
  }
  if (downstream_target_images.empty()) throw AttackError("BASSL needs at least one downstream target-class image");

  const std::size_t n = downstream_target_images.size();
  BasslPoisonSet out;
  out.migrated = draw_without_replacement(n, std::min(n, ceil_count(migration, n)), derive_seed(seed, "bassl/migrate"));
  const std::size_t m = out.migrated.size();
  out.stamped = draw_without_replacement(m, std::min(m, ceil_count(ratio, m)), derive_seed(seed, "bassl/stamp"));
  std::sort(out.stamped.begin(), out.stamped.end());

  const std::size_t img = pretrain_set.image_size();
  const std::size_t base_n = pretrain_set.size();
  out.dataset.name = pretrain_set.name + "+BASSL";
  out.dataset.split = pretrain_set.split;
  out.dataset.num_classes = pretrain_set.num_classes;
  out.dataset.images =
      nn::Tensor({base_n + m, pretrain_set.channels(), pretrain_set.height(), pretrain_set.width()});
  std::copy_n(pretrain_set.images.data(), base_n * img, out.dataset.images.data());
  out.dataset.labels = pretrain_set.labels;
  std::size_t next_stamped = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const nn::Tensor& src = downstream_target_images[out.migrated[k]];
    if (src.size() != img) {
      throw GeometryError("target image " + nn::to_string(src.shape()) + " does not match pre-training images");
    }
    const bool stamp = next_stamped < out.stamped.size() && out.stamped[next_stamped] == k;
    const nn::Tensor use = stamp ? stamp_trigger(src, spec.trigger) : src;
    if (stamp) ++next_stamped;
    std::copy_n(use.data(), img, out.dataset.images.data() + (base_n + k) * img);
    out.dataset.labels.push_back(0);
  }
  return out;
}

PoisonedEvalSet::PoisonedEvalSet(std::shared_ptr<const LabeledDataset> base, Trigger trigger, int target_class)
    : base_(std::move(base)), trigger_(std::move(trigger)), target_class_(target_class) {
  if (base_->split != Split::TEST) throw ValidationError("split", "poisoned evaluation requires the TEST split");
  if (!base_->empty()) trigger_.origin(base_->height(), base_->width());
}

nn::Tensor PoisonedEvalSet::image(std::size_t i) const { return stamp_trigger(base_->image(i), trigger_); }

nn::Tensor PoisonedEvalSet::batch(std::span<const std::size_t> indices) const {
  nn::Tensor b = base_->batch(indices);
  stamp_batch_inplace(b, trigger_);
  return b;
}

LabeledDataset PoisonedEvalSet::materialize() const {
  LabeledDataset out = *base_;
  if (!out.empty()) stamp_batch_inplace(out.images, trigger_);
  return out;
}

PoisonedEvalSet make_poisoned_eval_set(std::shared_ptr<const LabeledDataset> test_set, const AttackSpec& spec) {
  return PoisonedEvalSet(std::move(test_set), spec.trigger, spec.target_class);
}

}  // namespace bdkit::data
