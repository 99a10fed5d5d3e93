// SPDX-License-Identifier: Apache-2.0
#include "bdkit/attack/attack.hpp"

#include <cmath>
#include <numeric>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/poison.hpp"
#include "bdkit/nn/adam.hpp"
#include "bdkit/nn/ops.hpp"
#include "bdkit/pretrain/contrastive.hpp"

namespace bdkit::attack {

namespace {

void require_nonzero_rows(const nn::Tensor& z, const char* what) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += z[i * d + j] * z[i * d + j];
    if (std::sqrt(s) < nn::kNormEpsilon) {
      throw NumericalError(std::string(what) + " embedding " + std::to_string(i) + " has zero norm");
    }
  }
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> r(end - begin);
  std::iota(r.begin(), r.end(), begin);
  return r;
}

nn::Tensor concat_batches(const std::vector<const nn::Tensor*>& parts) {
  std::size_t n = 0;
  for (auto* p : parts) n += p->dim(0);
  const nn::Tensor& f = *parts.front();
  nn::Tensor out({n, f.dim(1), f.dim(2), f.dim(3)});
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy_n(p->data(), p->size(), out.data() + off);
    off += p->size();
  }
  return out;
}

}  // namespace

BadEncoderTerms badencoder_terms(pretrain::Encoder& poisoned, const pretrain::Encoder& frozen_clean,
                                 const nn::Tensor& shadow_batch, const Trigger& trigger,
                                 const nn::Tensor& reference_inputs, double lambda_effect, double lambda_utility) {
  if (shadow_batch.rank() != 4 || shadow_batch.dim(0) == 0) throw ValidationError("shadow_batch", "must be non-empty");
  if (reference_inputs.rank() != 4 || reference_inputs.dim(0) == 0) {
    throw ValidationError("reference_inputs", "must be non-empty");
  }
  if (lambda_effect < 0.0 || lambda_utility < 0.0) throw ValidationError("lambda", "weights must be non-negative");
  const std::size_t b = shadow_batch.dim(0), k = reference_inputs.dim(0);
  nn::Tensor stamped = shadow_batch;
  data::stamp_batch_inplace(stamped, trigger);

  const nn::Tensor all = concat_batches({&stamped, &shadow_batch, &reference_inputs});
  const nn::Var z = poisoned.forward(nn::Var(all), {.training = false}).embedding;
  const nn::Tensor clean_z = frozen_clean.forward(shadow_batch).embedding.value();
  require_nonzero_rows(z.value(), "poisoned");
  require_nonzero_rows(clean_z, "clean");

  const nn::Var zs = nn::l2_normalize_rows(nn::select_rows(z, range(0, b)));
  const nn::Var zx = nn::l2_normalize_rows(nn::select_rows(z, range(b, 2 * b)));
  const nn::Var zr = nn::l2_normalize_rows(nn::select_rows(z, range(2 * b, 2 * b + k)));
  const nn::Var zc = nn::l2_normalize_rows(nn::Var(clean_z));

  BadEncoderTerms t;
  const nn::Var cos_effect = nn::scale(nn::sum(nn::matmul(zs, nn::transpose(zr))), 1.0 / static_cast<double>(b * k));
  const nn::Var cos_utility = nn::scale(nn::sum(nn::mul(zx, zc)), 1.0 / static_cast<double>(b));
  t.effect = nn::add_scalar(nn::scale(cos_effect, -1.0), 1.0);
  t.utility = nn::add_scalar(nn::scale(cos_utility, -1.0), 1.0);
  t.total = nn::add(nn::scale(t.effect, lambda_effect), nn::scale(t.utility, lambda_utility));
  return t;
}

nn::Var badencoder_loss(pretrain::Encoder& poisoned, const pretrain::Encoder& frozen_clean,
                        const nn::Tensor& shadow_batch, const Trigger& trigger, const nn::Tensor& reference_inputs,
                        double lambda_effect, double lambda_utility) {
  return badencoder_terms(poisoned, frozen_clean, shadow_batch, trigger, reference_inputs, lambda_effect,
                          lambda_utility)
      .total;
}

pretrain::Encoder badencoder_poison(const pretrain::Encoder& clean, const AttackSpec& spec,
                                    const data::LabeledDataset& shadow_set, const BadEncoderHParams& hparams,
                                    std::uint64_t seed) {
  if (spec.method != AttackMethod::BADENCODER) throw ValidationError("attack.method", "expected BADENCODER");
  if (shadow_set.empty()) throw AttackError("BadEncoder needs a non-empty shadow set");
  pretrain::Encoder poisoned = clean;
  auto effect_on_shadow = [&] {
    double total = 0.0;
    for (std::size_t s = 0; s < shadow_set.size(); s += 256) {
      const auto idx = range(s, std::min(shadow_set.size(), s + 256));
      total += badencoder_terms(poisoned, clean, shadow_set.batch(idx), spec.trigger, hparams.reference_inputs)
                   .effect.value()
                   .item() *
               static_cast<double>(idx.size());
    }
    return total / static_cast<double>(shadow_set.size());
  };
  const double effect_initial = effect_on_shadow();

  std::vector<double> trace;
  if (hparams.epochs > 0) {
    Rng rng(derive_seed(seed, "badencoder/batches"));
    poisoned.set_trainable(true);
    nn::Adam opt(poisoned.parameters(), {.learning_rate = hparams.learning_rate});
    for (std::size_t epoch = 0; epoch < hparams.epochs; ++epoch) {
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& idx : pretrain::epoch_batches(shadow_set.size(), hparams.batch_size, 1, rng)) {
        // References ride along in every batch so the utility term pins their clean embeddings.
        const nn::Tensor batch = shadow_set.batch(idx);
        const BadEncoderTerms t = badencoder_terms(poisoned, clean, concat_batches({&batch, &hparams.reference_inputs}), spec.trigger,
                                                   hparams.reference_inputs, hparams.lambda_effect,
                                                   hparams.lambda_utility);
        const double v = t.total.value().item();
        if (!std::isfinite(v)) {
          poisoned.set_trainable(false);
          throw TrainingError("attack", epoch);
        }
        nn::backward(t.total);
        opt.step();
        sum += v;
        ++count;
      }
      trace.push_back(sum / static_cast<double>(count));
    }
    poisoned.set_trainable(false);
  }

  poisoned.metadata = clean.metadata;
  poisoned.metadata.erase("loss_trace");
  poisoned.metadata["stage"] = "attack";
  poisoned.metadata["loss_trace"] = trace;
  poisoned.metadata["effect_initial"] = effect_initial;
  poisoned.metadata["effect_final"] = effect_on_shadow();
  poisoned.metadata["attack"] = attack_manifest(spec);
  return poisoned;
}

pretrain::Encoder bassl_poison(const data::LabeledDataset& pretrain_set, const AttackSpec& spec,
                               const std::vector<nn::Tensor>& downstream_target_images,
                               const std::string& architecture, const PretrainHParams& hparams, std::uint64_t seed) {
  const data::BasslPoisonSet poison =
      data::build_bassl_poison_set(pretrain_set, spec, downstream_target_images, derive_seed(seed, "bassl/data"));
  pretrain::Encoder e = pretrain::contrastive_pretrain(poison.dataset, architecture, hparams, seed);
  e.metadata["stage"] = "attack";
  e.metadata["attack"] = attack_manifest(spec);
  e.metadata["attack"]["migrated"] = poison.migrated.size();
  e.metadata["attack"]["stamped"] = poison.stamped.size();
  return e;
}

std::string trigger_hash(const Trigger& trigger) {
  const auto& v = trigger.pattern.values();
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

nlohmann::json attack_manifest(const AttackSpec& spec) {
  nlohmann::json j;
  j["method"] = std::string(to_string(spec.method));
  j["target_class"] = spec.target_class;
  j["trigger"] = {{"pattern_sha256", trigger_hash(spec.trigger)},
                  {"shape", spec.trigger.pattern.shape()},
                  {"anchor", spec.trigger.anchor}};
  if (spec.method == AttackMethod::BADENCODER) {
    j["strength"] = {{"lambda_effect", spec.badencoder.lambda_effect},
                     {"lambda_utility", spec.badencoder.lambda_utility},
                     {"shadow_fraction", spec.badencoder.shadow_fraction},
                     {"reference_count", spec.badencoder.reference_count}};
  } else {
    j["strength"] = {{"poison_ratio", spec.bassl.poison_ratio},
                     {"migration_fraction", spec.bassl.migration_fraction}};
  }
  return j;
}

nn::Tensor pick_reference_inputs(const data::LabeledDataset& downstream_train, int target_class, std::size_t count,
                                 std::uint64_t seed) {
  std::vector<std::size_t> pool = downstream_train.indices_of_class(target_class);
  if (pool.empty()) throw AttackError("no images of target class " + std::to_string(target_class));
  if (count == 0) throw ValidationError("attack.badencoder.reference_count", "must be >= 1");
  Rng rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  return downstream_train.batch(pool);
}

}  // namespace bdkit::attack
