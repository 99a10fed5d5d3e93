// SPDX-License-Identifier: Apache-2.0
#include "bdkit/teacher/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/augment.hpp"
#include "bdkit/nn/adam.hpp"
#include "bdkit/nn/ops.hpp"
#include "bdkit/pretrain/contrastive.hpp"

namespace bdkit::teacher {

namespace {

nlohmann::json finetune_json(const PretrainHParams& h) {
  return {{"epochs", h.epochs},
          {"learning_rate", h.learning_rate},
          {"batch_size", h.batch_size},
          {"temperature", h.temperature},
          {"augmentation", h.augmentation}};
}

void tag(pretrain::Encoder& e, const pretrain::Encoder& parent, const char* method, nlohmann::json params) {
  e.metadata["stage"] = "teacher";
  e.metadata["teacher"] = {{"method", method}, {"params", std::move(params)}, {"parent_hash", parent.hash()}};
}

// Mean off-diagonal cosine of the rows of z (B,D), as a differentiable scalar.
nn::Var mean_pairwise_cosine(const nn::Var& z) {
  const std::size_t b = z.dim(0);
  const nn::Var n = nn::l2_normalize_rows(z);
  const nn::Var total = nn::sum(nn::matmul(n, nn::transpose(n)));
  return nn::scale(nn::add_scalar(total, -static_cast<double>(b)), 1.0 / static_cast<double>(b * (b - 1)));
}

nn::Var sigmoid_of(const nn::Tensor& logits) { return nn::sigmoid(nn::Var(logits)); }

// Two augmented views of one batch, stacked as (2B,C,H,W).
nn::Tensor two_views(const nn::Tensor& clean, const data::AugmentPolicy& policy, Rng& rng) {
  const nn::Tensor a = data::augment_batch(clean, policy, rng);
  const nn::Tensor b = data::augment_batch(clean, policy, rng);
  nn::Tensor both({2 * clean.dim(0), clean.dim(1), clean.dim(2), clean.dim(3)});
  std::copy_n(a.data(), a.size(), both.data());
  std::copy_n(b.data(), b.size(), both.data() + a.size());
  return both;
}

nn::Var contrastive_on(const nn::Var& z, std::size_t b, double temperature) {
  std::vector<std::size_t> first(b), second(b);
  std::iota(first.begin(), first.end(), 0);
  std::iota(second.begin(), second.end(), b);
  return pretrain::nt_xent_loss(nn::select_rows(z, first), nn::select_rows(z, second), temperature);
}

void write_doubles(const std::filesystem::path& p, const nn::Tensor& t) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

}  // namespace

pretrain::Encoder make_teacher_ft(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                  const PretrainHParams& finetune, std::uint64_t seed) {
  pretrain::Encoder t = poisoned;
  t.metadata["loss_trace"] = pretrain::contrastive_train(t, clean_subset, finetune, seed, "teacher_ft");
  tag(t, poisoned, "FT", finetune_json(finetune));
  return t;
}

std::vector<double> channel_activity(const pretrain::Encoder& encoder, const data::LabeledDataset& data) {
  const std::size_t last = encoder.tap_count() - 1;
  const std::size_t c = encoder.tap_channels(last);
  std::vector<double> score(c, 0.0);
  std::size_t count = 0;
  for (std::size_t s = 0; s < data.size(); s += 128) {
    std::vector<std::size_t> idx(std::min(data.size(), s + 128) - s);
    std::iota(idx.begin(), idx.end(), s);
    const nn::Tensor tap = encoder.forward(data.batch(idx)).taps[last].value();
    const std::size_t b = tap.dim(0), hw = tap.dim(2) * tap.dim(3);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < hw; ++k) score[ch] += std::abs(tap[(i * c + ch) * hw + k]);
    count += b * hw;
  }
  for (auto& v : score) v /= static_cast<double>(std::max<std::size_t>(count, 1));
  return score;
}

std::vector<std::size_t> select_channels(const std::vector<double>& scores, double fraction, PruneDirection direction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ValidationError("teacher.prune_fraction", "must lie in [0,1)");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return direction == PruneDirection::MOST_ACTIVE ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(scores.size()) + 1e-9));
  order.resize(k);
  return order;
}

pretrain::Encoder make_teacher_fp(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                  double prune_fraction, PruneDirection direction, const PretrainHParams& finetune,
                                  std::uint64_t seed) {
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
    throw ValidationError("teacher.prune_fraction", "must lie in [0,1)");
  }
  pretrain::Encoder t = poisoned;
  const std::size_t last = t.tap_count() - 1;
  const auto pruned = select_channels(channel_activity(t, clean_subset), prune_fraction, direction);
  nn::Tensor mask = t.tap_masks()[last];
  for (auto c : pruned) mask[c] = 0.0;
  t.set_tap_mask(last, mask);
  t.metadata["loss_trace"] = pretrain::contrastive_train(t, clean_subset, finetune, seed, "teacher_fp");
  tag(t, poisoned, "FP",
      {{"prune_fraction", prune_fraction},
       {"direction", std::string(to_string(direction))},
       {"pruned_channels", pruned},
       {"finetune", finetune_json(finetune)}});
  return t;
}

std::vector<std::vector<double>> anp_sensitivity(const pretrain::Encoder& encoder,
                                                 const data::LabeledDataset& clean_subset, double budget,
                                                 std::size_t batches, const PretrainHParams& hparams,
                                                 std::uint64_t seed) {
  if (!(budget > 0.0)) throw ValidationError("teacher.anp_budget", "must be > 0");
  if (clean_subset.size() < 2) throw BatchTooSmallError("ANP needs at least 2 clean images");
  pretrain::Encoder probe = encoder;
  const data::AugmentPolicy policy = data::augment_policy(hparams.augmentation);
  Rng rng(derive_seed(seed, "anp/batches"));
  std::vector<std::vector<double>> score(encoder.tap_count());
  for (std::size_t t = 0; t < encoder.tap_count(); ++t) score[t].assign(encoder.tap_channels(t), 0.0);
  std::size_t used = 0;
  for (std::size_t round = 0; used < std::max<std::size_t>(batches, 1); ++round) {
    for (const auto& idx : pretrain::epoch_batches(clean_subset.size(), hparams.batch_size, 2, rng)) {
      if (used >= std::max<std::size_t>(batches, 1)) break;
      std::vector<nn::Var> scales;
      for (std::size_t t = 0; t < encoder.tap_count(); ++t) {
        scales.emplace_back(nn::Tensor({encoder.tap_channels(t)}, 1.0), true);
      }
      const nn::Tensor views = two_views(clean_subset.batch(idx), policy, rng);
      const nn::Var z = probe.forward(nn::Var(views), {.training = false, .tap_scales = scales}).embedding;
      nn::backward(contrastive_on(z, idx.size(), hparams.temperature));
      for (std::size_t t = 0; t < scales.size(); ++t) {
        const nn::Tensor& g = scales[t].grad();
        for (std::size_t c = 0; c < g.size(); ++c) score[t][c] += budget * std::abs(g[c]);
      }
      ++used;
    }
  }
  for (auto& tap : score)
    for (auto& v : tap) {
      v /= static_cast<double>(used);
      if (v < nn::kNormEpsilon) v = 0.0;
    }
  return score;
}

pretrain::Encoder make_teacher_anp(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                   double perturb_budget, double prune_fraction, std::size_t batches,
                                   const PretrainHParams& finetune, std::uint64_t seed) {
  if (!(perturb_budget > 0.0)) throw ValidationError("teacher.anp_budget", "must be > 0");
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
    throw ValidationError("teacher.prune_fraction", "must lie in [0,1)");
  }
  pretrain::Encoder t = poisoned;
  const auto scores = anp_sensitivity(t, clean_subset, perturb_budget, batches, finetune, seed);
  nlohmann::json pruned = nlohmann::json::array();
  for (std::size_t tap = 0; tap < scores.size(); ++tap) {
    const auto chosen = select_channels(scores[tap], prune_fraction, PruneDirection::MOST_ACTIVE);
    nn::Tensor mask = t.tap_masks()[tap];
    for (auto c : chosen) mask[c] = 0.0;
    t.set_tap_mask(tap, mask);
    pruned.push_back(chosen);
  }
  t.metadata["loss_trace"] = pretrain::contrastive_train(t, clean_subset, finetune, seed, "teacher_anp");
  tag(t, poisoned, "ANP",
      {{"budget", perturb_budget},
       {"prune_fraction", prune_fraction},
       {"batches", batches},
       {"pruned_channels", pruned},
       {"finetune", finetune_json(finetune)}});
  return t;
}

TriggerEstimate invert_trigger(const pretrain::Encoder& encoder, const data::LabeledDataset& clean_subset,
                               std::array<std::size_t, 2> trigger_shape, const InversionOptions& options,
                               std::uint64_t seed) {
  if (clean_subset.size() < 2) throw BatchTooSmallError("trigger inversion needs at least 2 clean images");
  const std::size_t c = clean_subset.channels(), h = clean_subset.height(), w = clean_subset.width();
  if (trigger_shape[0] != h || trigger_shape[1] != w) {
    throw GeometryError("inversion mask must span the " + std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  std::vector<std::size_t> idx(clean_subset.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "inversion/batch"));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(idx.size(), std::max<std::size_t>(options.batch_size, 2)));
  const nn::Var images(clean_subset.batch(idx));

  nn::Var mask_logits(nn::Tensor({h, w}, 0.0), true);
  nn::Var pattern_logits(nn::Tensor({c, h, w}, 0.0), true);
  pretrain::Encoder probe = encoder;
  auto objective = [&]() {
    const nn::Var m = nn::sigmoid(mask_logits);
    const nn::Var p = nn::sigmoid(pattern_logits);
    const nn::Var z = probe.forward(nn::blend(images, m, p), {.training = false}).embedding;
    return nn::sub(mean_pairwise_cosine(z), nn::scale(nn::sum(m), options.mask_l1_weight));
  };

  TriggerEstimate best;
  best.mask = sigmoid_of(mask_logits.value()).value();
  best.pattern = sigmoid_of(pattern_logits.value()).value();
  nn::Adam opt(std::vector<nn::Var>{mask_logits, pattern_logits}, {.learning_rate = options.learning_rate});
  double best_value = -INFINITY;
  for (std::size_t step = 0; step <= options.steps; ++step) {
    const nn::Var obj = objective();
    const double v = obj.value().item();
    if (!std::isfinite(v)) throw InversionError("inversion objective became non-finite at step " + std::to_string(step));
    if (v > best_value) {
      best_value = v;
      best.mask = sigmoid_of(mask_logits.value()).value();
      best.pattern = sigmoid_of(pattern_logits.value()).value();
    }
    best.inversion_loss_trace.push_back(best_value);
    if (step == options.steps) break;
    nn::backward(nn::scale(obj, -1.0));
    opt.step();
  }
  return best;
}

double blended_pairwise_cosine(const pretrain::Encoder& encoder, const nn::Tensor& images,
                               const TriggerEstimate& estimate) {
  const nn::Var blended = nn::blend(nn::Var(images), nn::Var(estimate.mask), nn::Var(estimate.pattern));
  return mean_pairwise_cosine(encoder.forward(blended.value()).embedding).value().item();
}

double blended_clean_cosine(const pretrain::Encoder& encoder, const nn::Tensor& images,
                            const TriggerEstimate& estimate) {
  const nn::Var blended = nn::blend(nn::Var(images), nn::Var(estimate.mask), nn::Var(estimate.pattern));
  const nn::Var a = nn::l2_normalize_rows(encoder.forward(blended.value()).embedding);
  const nn::Var b = nn::l2_normalize_rows(encoder.forward(images).embedding);
  return nn::sum(nn::mul(a, b)).value().item() / static_cast<double>(images.dim(0));
}

pretrain::Encoder make_teacher_moth(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                    const TriggerEstimate& estimate, const PretrainHParams& unlearn,
                                    std::uint64_t seed) {
  pretrain::Encoder t = poisoned;
  const nn::Var mask(estimate.mask), pattern(estimate.pattern);
  auto unlearning = [&](pretrain::Encoder& enc, const nn::Tensor& clean) {
    const std::size_t b = clean.dim(0);
    nn::Tensor both({2 * b, clean.dim(1), clean.dim(2), clean.dim(3)});
    const nn::Tensor blended = nn::blend(nn::Var(clean), mask, pattern).value();
    std::copy_n(blended.data(), blended.size(), both.data());
    std::copy_n(clean.data(), clean.size(), both.data() + blended.size());
    const nn::Var z = enc.forward(nn::Var(both), {.training = true}).embedding;
    std::vector<std::size_t> first(b), second(b);
    std::iota(first.begin(), first.end(), 0);
    std::iota(second.begin(), second.end(), b);
    const nn::Var zb = nn::l2_normalize_rows(nn::select_rows(z, first));
    // Clean embeddings are the target, held constant for this step.
    const nn::Var zc(nn::l2_normalize_rows(nn::select_rows(z, second)).value());
    return nn::add_scalar(nn::scale(nn::sum(nn::mul(zb, zc)), -1.0 / static_cast<double>(b)), 1.0);
  };
  const double before = blended_clean_cosine(t, clean_subset.images, estimate);
  t.metadata["loss_trace"] = pretrain::contrastive_train(t, clean_subset, unlearn, seed, "teacher_moth", unlearning);
  tag(t, poisoned, "MOTH",
      {{"unlearn", finetune_json(unlearn)},
       {"blended_clean_cosine_before", before},
       {"blended_clean_cosine_after", blended_clean_cosine(t, clean_subset.images, estimate)},
       {"inverted_mask_l1", nn::sum(nn::Var(estimate.mask)).value().item()}});
  return t;
}

void TriggerEstimate::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_doubles(dir / "pattern.bin", pattern);
  write_doubles(dir / "mask.bin", mask);
  std::ofstream trace(dir / "trace.csv");
  trace << "step,objective\n";
  for (std::size_t i = 0; i < inversion_loss_trace.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", inversion_loss_trace[i]);
    trace << i << "," << buf << "\n";
  }
  nlohmann::json shapes = {{"pattern", pattern.shape()}, {"mask", mask.shape()}};
  std::ofstream(dir / "shapes.json") << shapes.dump() << "\n";
}

TriggerEstimate TriggerEstimate::load(const std::filesystem::path& dir) {
  std::ifstream sj(dir / "shapes.json");
  if (!sj) throw IoError("missing " + (dir / "shapes.json").string());
  nlohmann::json shapes;
  sj >> shapes;
  TriggerEstimate e;
  auto read = [&](const char* file, const char* key) {
    nn::Tensor t(shapes.at(key).get<nn::Shape>());
    std::ifstream in(dir / file, std::ios::binary);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw IoError("truncated " + (dir / file).string());
    return t;
  };
  e.pattern = read("pattern.bin", "pattern");
  e.mask = read("mask.bin", "mask");
  std::ifstream trace(dir / "trace.csv");
  std::string line;
  std::getline(trace, line);
  while (std::getline(trace, line)) {
    e.inversion_loss_trace.push_back(std::stod(line.substr(line.find(',') + 1)));
  }
  return e;
}

}  // namespace bdkit::teacher

namespace bdkit::teacher {

PretrainHParams finetune_hparams(const ExperimentConfig& config) {
  PretrainHParams h = config.pretrain;
  h.epochs = config.teacher.finetune_epochs;
  h.learning_rate = config.teacher.finetune_learning_rate;
  h.batch_size = config.optimizer.batch_size;
  return h;
}

PretrainHParams unlearn_hparams(const ExperimentConfig& config) {
  PretrainHParams h = finetune_hparams(config);
  h.epochs = config.teacher.unlearn_epochs;
  return h;
}

pretrain::Encoder make_teacher(TeacherMethod method, const pretrain::Encoder& poisoned,
                               const data::LabeledDataset& clean_subset, const ExperimentConfig& config,
                               std::uint64_t seed) {
  const TeacherHParams& t = config.teacher;
  switch (method) {
    case TeacherMethod::FT: return make_teacher_ft(poisoned, clean_subset, finetune_hparams(config), seed);
    case TeacherMethod::FP:
      return make_teacher_fp(poisoned, clean_subset, t.prune_fraction, t.prune_direction, finetune_hparams(config),
                             seed);
    case TeacherMethod::ANP:
      return make_teacher_anp(poisoned, clean_subset, t.anp_budget, t.prune_fraction, t.anp_batches,
                              finetune_hparams(config), seed);
    case TeacherMethod::MOTH: {
      InversionOptions io;
      io.steps = t.inversion_steps;
      io.learning_rate = t.inversion_learning_rate;
      io.mask_l1_weight = t.mask_l1_weight;
      const TriggerEstimate est = invert_trigger(poisoned, clean_subset, {clean_subset.height(), clean_subset.width()},
                                                 io, derive_seed(seed, "inversion"));
      pretrain::Encoder e = make_teacher_moth(poisoned, clean_subset, est, unlearn_hparams(config), seed);
      e.metadata["teacher"]["inversion_trace"] = est.inversion_loss_trace;
      return e;
    }
    case TeacherMethod::NONE: {
      pretrain::Encoder e = poisoned;
      tag(e, poisoned, "NONE", nlohmann::json::object());
      return e;
    }
  }
  throw ValidationError("teacher_method", "unknown teacher method");
}

}  // namespace bdkit::teacher
