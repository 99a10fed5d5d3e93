// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "bdkit/attack/attack.hpp"
#include "bdkit/core/error.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/data/poison.hpp"
#include "helpers.hpp"

namespace bdkit::attack {
namespace {

using bdkit::testing::gradient_relative_error;
using bdkit::testing::random_tensor;
using pretrain::Encoder;

double cosine(const nn::Tensor& z, std::size_t i, const nn::Tensor& w, std::size_t j) {
  const std::size_t d = z.dim(1);
  double dot = 0, a = 0, b = 0;
  for (std::size_t k = 0; k < d; ++k) {
    dot += z[i * d + k] * w[j * d + k];
    a += z[i * d + k] * z[i * d + k];
    b += w[j * d + k] * w[j * d + k];
  }
  return dot / std::sqrt(a * b);
}

struct Fixture {
  Rng rng{3};
  Encoder clean = Encoder::create("tiny-cnn:4,6", 1);
  Encoder poisoned = Encoder::create("tiny-cnn:4,6", 2);
  nn::Tensor shadow = random_tensor({2, 3, 8, 8}, rng, 0.0, 0.9);
  nn::Tensor refs = random_tensor({3, 3, 8, 8}, rng, 0.0, 0.9);
  Trigger trigger = Trigger::solid(2, 2, {1, 1, 1});
};

// Oracle built from embed() and a scalar cosine, not from the loss graph.
TEST(BadEncoderLoss, MatchesDirectCosineOracle) {
  Fixture f;
  nn::Tensor stamped = f.shadow;
  data::stamp_batch_inplace(stamped, f.trigger);
  const nn::Tensor zs = f.poisoned.embed(stamped), zx = f.poisoned.embed(f.shadow), zr = f.poisoned.embed(f.refs);
  const nn::Tensor zc = f.clean.embed(f.shadow);
  double effect = 0, utility = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) effect += cosine(zs, i, zr, j);
    utility += cosine(zx, i, zc, i);
  }
  effect = 1.0 - effect / 6.0;
  utility = 1.0 - utility / 2.0;
  const auto t = badencoder_terms(f.poisoned, f.clean, f.shadow, f.trigger, f.refs, 0.7, 1.3);
  EXPECT_NEAR(t.effect.value().item(), effect, 1e-12);
  EXPECT_NEAR(t.utility.value().item(), utility, 1e-12);
  EXPECT_NEAR(t.total.value().item(), 0.7 * effect + 1.3 * utility, 1e-12);
}

TEST(BadEncoderLoss, WeightsAndDegenerateCases) {
  Fixture f;
  const auto t = badencoder_terms(f.poisoned, f.clean, f.shadow, f.trigger, f.refs, 0.0, 1.0);
  EXPECT_NEAR(t.total.value().item(), t.utility.value().item(), 1e-15);

  // identical encoders: utility vanishes
  Encoder same = f.clean;
  EXPECT_NEAR(badencoder_terms(same, f.clean, f.shadow, f.trigger, f.refs).utility.value().item(), 0.0, 1e-12);

  // the reference is the stamped shadow image itself: effect vanishes
  nn::Tensor one = random_tensor({1, 3, 8, 8}, f.rng, 0.0, 0.9);
  nn::Tensor ref = one;
  data::stamp_batch_inplace(ref, f.trigger);
  EXPECT_NEAR(badencoder_terms(f.poisoned, f.clean, one, f.trigger, ref).effect.value().item(), 0.0, 1e-12);

  EXPECT_THROW(badencoder_terms(f.poisoned, f.clean, f.shadow, f.trigger, f.refs, -1.0, 1.0), ValidationError);
  EXPECT_THROW(badencoder_terms(f.poisoned, f.clean, f.shadow, f.trigger, nn::Tensor({0, 3, 8, 8})),
               ValidationError);
}

TEST(BadEncoderLoss, ZeroEmbeddingIsNumericalError) {
  Fixture f;
  Encoder dead = f.poisoned;
  for (auto& p : dead.parameters()) p.mutable_value().fill(0.0);
  EXPECT_THROW(badencoder_terms(dead, f.clean, f.shadow, f.trigger, f.refs), NumericalError);
}

TEST(BadEncoderLoss, ParameterGradientMatchesFiniteDifferences) {
  Fixture f;
  Encoder enc = Encoder::create("tiny-cnn:2,4", 5);
  const Encoder clean = Encoder::create("tiny-cnn:2,4", 6);
  ASSERT_EQ(enc.parameter_count(), 132u);
  std::vector<nn::Tensor> init;
  for (const auto& p : enc.parameters()) init.push_back(p.value());
  const double err = gradient_relative_error(
      [&](const std::vector<nn::Var>& v) {
        for (std::size_t i = 0; i < v.size(); ++i) enc.parameters()[i] = v[i];
        return badencoder_loss(enc, clean, f.shadow, f.trigger, f.refs, 1.0, 0.5);
      },
      init);
  EXPECT_LT(err, 1e-6);
}

data::LabeledDataset synth(std::size_t n) {
  data::LoadOptions opt;
  opt.synth_train_size = n;
  return data::load_dataset("SYNTH-TINY", Split::TRAIN, opt);
}

TEST(BadEncoderPoison, ZeroEpochsKeepsWeightsAndInputsUntouched) {
  const auto shadow = synth(30);
  const auto shadow_copy = shadow;
  const Encoder clean = Encoder::create("tiny-cnn:4,8", 1);
  const std::string clean_hash = clean.hash();
  BadEncoderHParams hp;
  hp.epochs = 0;
  hp.reference_inputs = pick_reference_inputs(shadow, 0, 3, 9);
  const Encoder p = badencoder_poison(clean, AttackSpec{}, shadow, hp, 1);
  EXPECT_EQ(p.flat_parameters(), clean.flat_parameters());
  EXPECT_DOUBLE_EQ(p.metadata["effect_initial"].get<double>(), p.metadata["effect_final"].get<double>());
  EXPECT_EQ(clean.hash(), clean_hash);
  EXPECT_EQ(shadow.images, shadow_copy.images);
}

TEST(BadEncoderPoison, TrainingLowersEffectDeterministically) {
  const auto shadow = synth(60);
  const Encoder clean = Encoder::create("tiny-cnn:4,8", 1);
  BadEncoderHParams hp;
  hp.epochs = 15;
  hp.batch_size = 32;
  hp.learning_rate = 3e-3;
  hp.reference_inputs = pick_reference_inputs(shadow, 0, 3, 9);
  AttackSpec spec;
  spec.trigger = Trigger::solid(3, 3, {1, 1, 1});
  const Encoder a = badencoder_poison(clean, spec, shadow, hp, 4);
  const Encoder b = badencoder_poison(clean, spec, shadow, hp, 4);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_LT(a.metadata["effect_final"].get<double>(), a.metadata["effect_initial"].get<double>());
  EXPECT_EQ(a.metadata["attack"]["method"], "BADENCODER");
  EXPECT_EQ(a.metadata["attack"]["trigger"]["pattern_sha256"], trigger_hash(spec.trigger));

  AttackSpec wrong = spec;
  wrong.method = AttackMethod::BASSL;
  EXPECT_THROW(badencoder_poison(clean, wrong, shadow, hp, 4), ValidationError);
  data::LabeledDataset empty = shadow;
  empty.images = nn::Tensor({0, 3, 16, 16});
  empty.labels.clear();
  EXPECT_THROW(badencoder_poison(clean, spec, empty, hp, 4), AttackError);
}

TEST(AttackManifest, RecordsGeometryAndStrength) {
  AttackSpec spec;
  spec.trigger = Trigger::solid(5, 5, {1, 0, 0}, {2, 3});
  spec.target_class = 4;
  const auto j = attack_manifest(spec);
  EXPECT_EQ(j["target_class"], 4);
  EXPECT_EQ(j["trigger"]["shape"], (nn::Shape{3, 5, 5}));
  EXPECT_EQ(j["trigger"]["anchor"][0], 2);
  EXPECT_DOUBLE_EQ(j["strength"]["lambda_effect"].get<double>(), 1.0);
  spec.method = AttackMethod::BASSL;
  EXPECT_DOUBLE_EQ(attack_manifest(spec)["strength"]["poison_ratio"].get<double>(), 0.5);
  EXPECT_NE(trigger_hash(spec.trigger), trigger_hash(Trigger::solid(5, 5, {1, 1, 0})));
}

TEST(ReferenceInputs, DeterministicTargetClassOnly) {
  const auto ds = synth(60);
  const nn::Tensor a = pick_reference_inputs(ds, 1, 4, 7), b = pick_reference_inputs(ds, 1, 4, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.dim(0), 4u);
  // every chosen image belongs to class 1
  const auto pool = ds.indices_of_class(1);
  const std::size_t per = a.size() / 4;
  for (std::size_t k = 0; k < 4; ++k) {
    bool found = false;
    for (auto i : pool) {
      const nn::Tensor img = ds.image(i);
      found = found || std::equal(img.data(), img.data() + per, a.data() + k * per);
    }
    EXPECT_TRUE(found);
  }
  EXPECT_EQ(pick_reference_inputs(ds, 1, 1000, 7).dim(0), pool.size());
  EXPECT_THROW(pick_reference_inputs(ds, 7, 3, 1), AttackError);
  EXPECT_THROW(pick_reference_inputs(ds, 1, 0, 1), ValidationError);
}

TEST(Bassl, PoisonedPretrainIsDeterministic) {
  const auto ds = synth(45);
  Rng rng(2);
  std::vector<nn::Tensor> targets;
  for (int i = 0; i < 10; ++i) targets.push_back(random_tensor({3, 16, 16}, rng, 0.0, 0.9));
  AttackSpec spec;
  spec.method = AttackMethod::BASSL;
  PretrainHParams hp;
  hp.epochs = 2;
  hp.batch_size = 16;
  hp.augmentation = "simclr-tiny";
  const Encoder a = bassl_poison(ds, spec, targets, "tiny-cnn:4,8", hp, 3);
  const Encoder b = bassl_poison(ds, spec, targets, "tiny-cnn:4,8", hp, 3);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.metadata["attack"]["migrated"], 6);
  EXPECT_EQ(a.metadata["attack"]["stamped"], 3);
  EXPECT_NE(a.hash(), bassl_poison(ds, spec, targets, "tiny-cnn:4,8", hp, 4).hash());
}

}  // namespace
}  // namespace bdkit::attack
