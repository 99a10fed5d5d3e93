// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "bdkit/core/config.hpp"
#include "bdkit/core/error.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/teacher/teacher.hpp"
#include "helpers.hpp"

namespace bdkit::teacher {
namespace {

using bdkit::testing::random_tensor;
using bdkit::testing::ScratchDir;
using pretrain::Encoder;

data::LabeledDataset synth(std::size_t n) {
  data::LoadOptions opt;
  opt.synth_train_size = n;
  return data::load_dataset("SYNTH-TINY", Split::TRAIN, opt);
}

PretrainHParams ft(std::size_t epochs) {
  PretrainHParams h;
  h.epochs = epochs;
  h.batch_size = 16;
  h.learning_rate = 1e-3;
  h.augmentation = "simclr-tiny";
  return h;
}

const char* kArch = "tiny-cnn:4,8";

TEST(TeacherFt, ZeroEpochsIsIdentityWithLineage) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  const Encoder t = make_teacher_ft(poisoned, clean, ft(0), 2);
  EXPECT_EQ(t.flat_parameters(), poisoned.flat_parameters());
  EXPECT_EQ(t.metadata["teacher"]["method"], "FT");
  EXPECT_EQ(t.metadata["teacher"]["parent_hash"], poisoned.hash());
}

TEST(TeacherFt, TrainingMovesWeightsButLeavesParentAlone) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  const std::string before = poisoned.hash();
  const Encoder t = make_teacher_ft(poisoned, clean, ft(2), 2);
  EXPECT_NE(t.flat_parameters(), poisoned.flat_parameters());
  EXPECT_EQ(poisoned.hash(), before);
  EXPECT_EQ(make_teacher_ft(poisoned, clean, ft(2), 2).hash(), t.hash());
}

TEST(SelectChannels, OrderTiesAndFractions) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1, 0.9, 0.3};
  EXPECT_EQ(select_channels(s, 0.5, PruneDirection::MOST_ACTIVE), (std::vector<std::size_t>{1, 4, 0}));
  EXPECT_EQ(select_channels(s, 0.5, PruneDirection::LEAST_ACTIVE), (std::vector<std::size_t>{3, 5, 0}));
  EXPECT_TRUE(select_channels(s, 0.0, PruneDirection::MOST_ACTIVE).empty());
  EXPECT_EQ(select_channels(s, 0.34, PruneDirection::MOST_ACTIVE).size(), 2u);  // floor(2.04)
  EXPECT_THROW(select_channels(s, 1.0, PruneDirection::MOST_ACTIVE), ValidationError);
  EXPECT_THROW(select_channels(s, -0.1, PruneDirection::MOST_ACTIVE), ValidationError);
  const std::vector<double> flat(4, 1.0);
  EXPECT_EQ(select_channels(flat, 0.5, PruneDirection::LEAST_ACTIVE), (std::vector<std::size_t>{0, 1}));
}

TEST(TeacherFp, ZeroFractionPrunesNothing) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  const Encoder fp = make_teacher_fp(poisoned, clean, 0.0, PruneDirection::MOST_ACTIVE, ft(0), 3);
  EXPECT_EQ(fp.flat_parameters(), poisoned.flat_parameters());
  for (const auto& m : fp.tap_masks())
    for (double v : m.values()) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(fp.metadata["teacher"]["params"]["pruned_channels"].empty());
}

TEST(TeacherFp, PrunedChannelsStayZeroAfterFineTuning) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  const auto activity = channel_activity(poisoned, clean);
  ASSERT_EQ(activity.size(), 8u);
  const auto expected = select_channels(activity, 0.25, PruneDirection::MOST_ACTIVE);
  const Encoder fp = make_teacher_fp(poisoned, clean, 0.25, PruneDirection::MOST_ACTIVE, ft(2), 3);
  EXPECT_EQ(fp.metadata["teacher"]["params"]["pruned_channels"].get<std::vector<std::size_t>>(), expected);
  const auto after = channel_activity(fp, clean);
  for (auto c : expected) EXPECT_EQ(after[c], 0.0);
  EXPECT_THROW(make_teacher_fp(poisoned, clean, 1.0, PruneDirection::MOST_ACTIVE, ft(0), 3), ValidationError);
}

TEST(TeacherFp, MaskingIsIdempotent) {
  Rng rng(4);
  Encoder e = Encoder::create(kArch, 1);
  nn::Tensor mask({8}, 1.0);
  mask[3] = 0.0;
  e.set_tap_mask(1, mask);
  const nn::Tensor x = random_tensor({3, 3, 16, 16}, rng, 0, 1);
  const nn::Tensor once = e.embed(x);
  e.set_tap_mask(1, mask);
  EXPECT_EQ(e.embed(x), once);
}

TEST(Anp, BudgetScalingAndDeadChannels) {
  const auto clean = synth(30);
  Encoder e = Encoder::create(kArch, 1);
  nn::Tensor mask({8}, 1.0);
  mask[5] = 0.0;
  e.set_tap_mask(1, mask);
  const auto s1 = anp_sensitivity(e, clean, 0.4, 2, ft(1), 7);
  const auto s2 = anp_sensitivity(e, clean, 0.2, 2, ft(1), 7);
  ASSERT_EQ(s1.size(), 2u);
  EXPECT_EQ(s1[1][5], 0.0);  // a masked channel has no influence on the loss
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < s1[t].size(); ++c) EXPECT_NEAR(s1[t][c], 2.0 * s2[t][c], 1e-12);
  for (const auto& tap : anp_sensitivity(e, clean, 1e-30, 2, ft(1), 7))
    for (double v : tap) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(anp_sensitivity(e, clean, 0.0, 2, ft(1), 7), ValidationError);
  EXPECT_THROW(make_teacher_anp(e, clean, -1.0, 0.1, 2, ft(0), 7), ValidationError);
}

TEST(Anp, PrunesMostSensitivePerTap) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  const Encoder t = make_teacher_anp(poisoned, clean, 0.4, 0.25, 2, ft(0), 7);
  const auto scores = anp_sensitivity(poisoned, clean, 0.4, 2, ft(0), 7);
  for (std::size_t tap = 0; tap < 2; ++tap) {
    const auto chosen = select_channels(scores[tap], 0.25, PruneDirection::MOST_ACTIVE);
    EXPECT_EQ(t.metadata["teacher"]["params"]["pruned_channels"][tap].get<std::vector<std::size_t>>(), chosen);
    for (auto c : chosen) EXPECT_EQ(t.tap_masks()[tap][c], 0.0);
  }
}

TEST(Inversion, ZeroStepsReturnsInitialization) {
  const auto clean = synth(30);
  const Encoder e = Encoder::create(kArch, 1);
  InversionOptions o;
  o.steps = 0;
  const TriggerEstimate est = invert_trigger(e, clean, {16, 16}, o, 1);
  for (double v : est.mask.values()) EXPECT_NEAR(v, 0.5, 1e-12);
  for (double v : est.pattern.values()) EXPECT_NEAR(v, 0.5, 1e-12);
  EXPECT_EQ(est.inversion_loss_trace.size(), 1u);
  EXPECT_THROW(invert_trigger(e, clean, {3, 3}, o, 1), GeometryError);
}

TEST(Inversion, TraceIsMonotoneAndEstimateInRange) {
  const auto clean = synth(30);
  const auto copy = clean;
  const Encoder e = Encoder::create(kArch, 1);
  const std::string h = e.hash();
  InversionOptions o;
  o.steps = 15;
  o.batch_size = 16;
  const TriggerEstimate est = invert_trigger(e, clean, {16, 16}, o, 1);
  ASSERT_EQ(est.inversion_loss_trace.size(), 16u);
  for (std::size_t i = 1; i < est.inversion_loss_trace.size(); ++i)
    EXPECT_GE(est.inversion_loss_trace[i], est.inversion_loss_trace[i - 1]);
  for (double v : est.mask.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(e.hash(), h);
  EXPECT_EQ(clean.images, copy.images);
}

TEST(Inversion, EstimateRoundTripsThroughDisk) {
  ScratchDir dir("trigger");
  Rng rng(2);
  TriggerEstimate est;
  est.pattern = random_tensor({3, 4, 4}, rng, 0, 1);
  est.mask = random_tensor({4, 4}, rng, 0, 1);
  est.inversion_loss_trace = {0.1, 0.2, 0.25};
  est.save(dir.path());
  const TriggerEstimate back = TriggerEstimate::load(dir.path());
  EXPECT_EQ(back.pattern, est.pattern);
  EXPECT_EQ(back.mask, est.mask);
  ASSERT_EQ(back.inversion_loss_trace.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back.inversion_loss_trace[i], est.inversion_loss_trace[i], 1e-15);
  EXPECT_THROW(TriggerEstimate::load(dir.path() / "nowhere"), IoError);
}

TEST(Inversion, BlendedCosinesOnZeroMask) {
  Rng rng(3);
  const Encoder e = Encoder::create(kArch, 1);
  const nn::Tensor x = random_tensor({4, 3, 16, 16}, rng, 0, 1);
  TriggerEstimate est;
  est.pattern = nn::Tensor({3, 16, 16}, 0.5);
  est.mask = nn::Tensor({16, 16}, 0.0);
  EXPECT_NEAR(blended_clean_cosine(e, x, est), 1.0, 1e-12);
  // a full mask maps every image to the same pattern
  est.mask.fill(1.0);
  EXPECT_NEAR(blended_pairwise_cosine(e, x, est), 1.0, 1e-12);
}

TEST(TeacherMoth, ZeroEpochsIsIdentity) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  TriggerEstimate est;
  est.pattern = nn::Tensor({3, 16, 16}, 1.0);
  est.mask = nn::Tensor({16, 16}, 0.1);
  const Encoder t = make_teacher_moth(poisoned, clean, est, ft(0), 1);
  EXPECT_EQ(t.flat_parameters(), poisoned.flat_parameters());
  EXPECT_EQ(t.metadata["teacher"]["method"], "MOTH");
  const Encoder t2 = make_teacher_moth(poisoned, clean, est, ft(1), 1);
  EXPECT_NE(t2.flat_parameters(), poisoned.flat_parameters());
}

TEST(MakeTeacher, DispatchAndNone) {
  const auto clean = synth(30);
  const Encoder poisoned = Encoder::create(kArch, 1);
  ExperimentConfig cfg;
  cfg.teacher.finetune_epochs = 0;
  cfg.teacher.unlearn_epochs = 0;
  cfg.teacher.inversion_steps = 2;
  cfg.teacher.anp_batches = 1;
  cfg.optimizer.batch_size = 16;
  const Encoder none = make_teacher(TeacherMethod::NONE, poisoned, clean, cfg, 1);
  EXPECT_EQ(none.flat_parameters(), poisoned.flat_parameters());
  EXPECT_EQ(none.metadata["teacher"]["method"], "NONE");
  for (auto m : {TeacherMethod::FT, TeacherMethod::FP, TeacherMethod::ANP, TeacherMethod::MOTH}) {
    const Encoder t = make_teacher(m, poisoned, clean, cfg, 1);
    EXPECT_EQ(t.metadata["teacher"]["method"], std::string(to_string(m)));
  }
  EXPECT_EQ(finetune_hparams(cfg).batch_size, 16u);
  EXPECT_EQ(unlearn_hparams(cfg).epochs, 0u);
}

}  // namespace
}  // namespace bdkit::teacher
