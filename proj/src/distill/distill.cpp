// SPDX-License-Identifier: Apache-2.0
#include "bdkit/distill/distill.hpp"

#include <cmath>
#include <numeric>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/augment.hpp"
#include "bdkit/nn/adam.hpp"
#include "bdkit/nn/ops.hpp"
#include "bdkit/pretrain/contrastive.hpp"
#include "bdkit/teacher/teacher.hpp"

namespace bdkit::distill {

namespace {

void require_pairwise(const DistillBatchView& view, const char* loss) {
  if (view.batch_size() < 2) {
    throw BatchTooSmallError(std::string(loss) + " compares examples within a batch and needs B >= 2");
  }
}

void require_p(double p) {
  if (!(p >= 1.0)) throw ValidationError("distill.attention_p", "must be at least 1");
}

// Attention of every example flattened and L2-normalized: (B, H*W).
nn::Var normalized_attention(const nn::Var& tap, double p) {
  const nn::Var a = nn::channel_abs_pow_sum(tap, p);
  return nn::l2_normalize_rows(nn::flatten(a));
}

// Batch mean of the per-example distance between normalized attention maps.
nn::Var attention_distance(const nn::Var& student_tap, const nn::Var& teacher_tap, double p) {
  const nn::Var d = nn::sub(normalized_attention(student_tap, p), normalized_attention(teacher_tap, p));
  return nn::mean(nn::row_norm(d));
}

nn::Var cosine_gram(const nn::Var& x) {
  const nn::Var n = nn::l2_normalize_rows(nn::flatten(x));
  return nn::matmul(n, nn::transpose(n));
}

// KL(softmax(t/T) || softmax(s/T)) averaged over rows.
nn::Var softened_kl(const nn::Var& student, const nn::Var& teacher, double temperature) {
  const nn::Var log_t(nn::log_softmax_rows(nn::scale(teacher, 1.0 / temperature)).value());
  const nn::Var p_t(nn::softmax_rows(nn::scale(teacher, 1.0 / temperature)).value());
  const nn::Var log_s = nn::log_softmax_rows(nn::scale(student, 1.0 / temperature));
  return nn::scale(nn::sum(nn::mul(p_t, nn::sub(log_t, log_s))), 1.0 / static_cast<double>(student.dim(0)));
}

std::size_t input_channels(const pretrain::Encoder& e) { return e.parameters().front().dim(1); }

nn::Var constant(const nn::Var& v) { return nn::Var(v.value()); }

}  // namespace

void DistillBatchView::validate() const {
  if (teacher_taps.size() != student_taps.size()) {
    throw ValidationError("distill.taps", "teacher has " + std::to_string(teacher_taps.size()) + " taps, student " +
                                              std::to_string(student_taps.size()));
  }
  for (std::size_t t = 0; t < teacher_taps.size(); ++t) {
    if (teacher_taps[t].shape() != student_taps[t].shape()) {
      throw ValidationError("distill.taps", "tap " + std::to_string(t) + " shape " +
                                                nn::to_string(teacher_taps[t].shape()) + " vs " +
                                                nn::to_string(student_taps[t].shape()));
    }
  }
  if (teacher_embedding.shape() != student_embedding.shape()) {
    throw ValidationError("distill.embedding", nn::to_string(teacher_embedding.shape()) + " vs " +
                                                   nn::to_string(student_embedding.shape()));
  }
}

AttentionMap attention_map(const nn::Tensor& tap, double p) {
  require_p(p);
  return {nn::channel_abs_pow_sum(nn::Var(tap), p).value(), p};
}

nn::Var loss_fitnets(const DistillBatchView& view) {
  view.validate();
  return nn::mean(nn::square(nn::sub(view.student_embedding, view.teacher_embedding)));
}

nn::Var loss_cc(const DistillBatchView& view) {
  view.validate();
  require_pairwise(view, "CC");
  const double b = static_cast<double>(view.batch_size());
  const nn::Var diff = nn::sub(cosine_gram(view.student_embedding), cosine_gram(view.teacher_embedding));
  return nn::scale(nn::sqrt_guarded(nn::sum(nn::square(diff))), 1.0 / (b * b));
}

nn::Var loss_atd(const DistillBatchView& view, double p) {
  view.validate();
  require_p(p);
  std::vector<nn::Var> terms;
  for (std::size_t t = 0; t < view.student_taps.size(); ++t) {
    terms.push_back(attention_distance(view.student_taps[t], view.teacher_taps[t], p));
  }
  return nn::add_all(terms);
}

std::vector<double> afd_tap_weights(const std::vector<nn::Tensor>& teacher_taps, double p) {
  require_p(p);
  const std::size_t n = teacher_taps.size();
  std::vector<double> mass(n);
  for (std::size_t t = 0; t < n; ++t) {
    const nn::Tensor a = attention_map(teacher_taps[t], p).values;
    mass[t] = std::accumulate(a.values().begin(), a.values().end(), 0.0) / static_cast<double>(a.size());
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  const bool degenerate = std::any_of(mass.begin(), mass.end(), [](double m) { return m < nn::kNormEpsilon; });
  if (degenerate) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  std::vector<double> w(n);
  for (std::size_t t = 0; t < n; ++t) w[t] = std::exp(mass[t] / total);
  const double z = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= z;
  return w;
}

nn::Var loss_afd(const DistillBatchView& view, double p) {
  view.validate();
  std::vector<nn::Tensor> teacher;
  for (const auto& v : view.teacher_taps) teacher.push_back(v.value());
  const auto w = afd_tap_weights(teacher, p);
  std::vector<nn::Var> terms;
  for (std::size_t t = 0; t < view.student_taps.size(); ++t) {
    terms.push_back(nn::scale(attention_distance(view.student_taps[t], view.teacher_taps[t], p), w[t]));
  }
  return nn::add_all(terms);
}

nn::Var loss_sp(const DistillBatchView& view) {
  view.validate();
  require_pairwise(view, "SP");
  const double b = static_cast<double>(view.batch_size());
  std::vector<nn::Var> terms;
  for (std::size_t t = 0; t < view.student_taps.size(); ++t) {
    const nn::Var diff = nn::sub(cosine_gram(view.student_taps[t]), cosine_gram(view.teacher_taps[t]));
    terms.push_back(nn::scale(nn::sum(nn::square(diff)), 1.0 / (b * b)));
  }
  return nn::add_all(terms);
}

nn::Var loss_kd(const DistillBatchView& view, double temperature, bool include_taps) {
  if (!(temperature > 0.0)) throw ValidationError("distill.kd_temperature", "must be positive");
  view.validate();
  std::vector<nn::Var> terms{softened_kl(view.student_embedding, view.teacher_embedding, temperature)};
  if (include_taps) {
    for (std::size_t t = 0; t < view.student_taps.size(); ++t) {
      terms.push_back(softened_kl(nn::global_avg_pool(view.student_taps[t]),
                                  nn::global_avg_pool(view.teacher_taps[t]), temperature));
    }
  }
  return nn::scale(nn::add_all(terms), temperature * temperature);
}

nn::Var distill_loss(LossKind kind, const DistillBatchView& view, const DistillHParams& h) {
  switch (kind) {
    case LossKind::FITNETS: return loss_fitnets(view);
    case LossKind::CC: return loss_cc(view);
    case LossKind::AFD: return loss_afd(view, h.attention_p);
    case LossKind::ATD: return loss_atd(view, h.attention_p);
    case LossKind::SP: return loss_sp(view);
    case LossKind::KD: return loss_kd(view, h.kd_temperature, h.kd_include_taps);
  }
  throw ValidationError("loss_kind", "unknown loss kind");
}

pretrain::Encoder init_student(StudentStrategy strategy, const pretrain::Encoder& poisoned,
                               const data::LabeledDataset& clean_subset, const PretrainHParams& warmup,
                               std::uint64_t seed) {
  if (!clean_subset.empty() && clean_subset.channels() != input_channels(poisoned)) {
    throw ValidationError("architecture", poisoned.architecture() + " takes " +
                                              std::to_string(input_channels(poisoned)) + "-channel input, " +
                                              clean_subset.name + " has " + std::to_string(clean_subset.channels()));
  }
  pretrain::Encoder s = [&] {
    switch (strategy) {
      case StudentStrategy::RAW: return pretrain::Encoder(poisoned);
      case StudentStrategy::VOID: return pretrain::initial_encoder(poisoned.architecture(), seed);
      case StudentStrategy::WARMUP: return pretrain::warm_up_train(clean_subset, poisoned.architecture(), warmup, seed);
    }
    throw ValidationError("student_strategy", "unknown strategy");
  }();
  s.metadata["strategy"] = std::string(to_string(strategy));
  return s;
}

pretrain::Encoder distill(const pretrain::Encoder& teacher, const pretrain::Encoder& student,
                          const data::LabeledDataset& clean_subset, LossKind loss_kind, std::size_t epochs,
                          const OptimizerHParams& optimizer, const DistillHParams& hparams, std::uint64_t seed) {
  if (teacher.architecture() != student.architecture()) {
    throw ValidationError("distill.taps", "teacher " + teacher.architecture() + " and student " +
                                              student.architecture() + " differ");
  }
  const std::string teacher_hash = teacher.hash();
  pretrain::Encoder s = student;
  std::vector<double> trace;
  if (epochs > 0) {
    if (clean_subset.empty()) throw ValidationError("clean_subset", "distillation needs clean data");
    const data::AugmentPolicy policy = data::augment_policy(hparams.augmentation);
    const bool pairwise = loss_kind == LossKind::CC || loss_kind == LossKind::SP;
    Rng rng(derive_seed(seed, "distill/batches"));
    s.set_trainable(true);
    nn::Adam opt(s.parameters(), {.learning_rate = optimizer.learning_rate});
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& idx : pretrain::epoch_batches(clean_subset.size(), optimizer.batch_size, pairwise ? 2 : 1, rng)) {
        const nn::Tensor x = data::augment_batch(clean_subset.batch(idx), policy, rng);
        const pretrain::EncoderOutput t = teacher.forward(x);
        const pretrain::EncoderOutput o = s.forward(nn::Var(x), {.training = true});
        DistillBatchView view{{}, constant(t.embedding), o.taps, o.embedding};
        for (const auto& tap : t.taps) view.teacher_taps.push_back(constant(tap));
        const nn::Var loss = distill_loss(loss_kind, view, hparams);
        const double v = loss.value().item();
        if (!std::isfinite(v)) {
          s.set_trainable(false);
          throw TrainingError("distill", epoch);
        }
        nn::backward(loss);
        opt.step();
        sum += v;
        ++count;
      }
      trace.push_back(sum / static_cast<double>(count));
    }
    s.set_trainable(false);
  }
  if (teacher.hash() != teacher_hash) throw Error("distillation mutated the teacher");

  s.metadata["stage"] = "distill";
  s.metadata["loss_trace"] = trace;
  s.metadata["distill"] = {{"teacher_hash", teacher_hash},
                           {"teacher_method", teacher.metadata.value("teacher", nlohmann::json::object())
                                                  .value("method", std::string("NONE"))},
                           {"student_strategy", student.metadata.value("strategy", std::string("RAW"))},
                           {"student_init_hash", student.hash()},
                           {"loss_kind", std::string(to_string(loss_kind))},
                           {"epochs", epochs}};
  return s;
}

std::uint64_t iteration_seed(std::uint64_t root, const std::string& stage, std::size_t iteration) {
  return derive_seed(root, iteration == 0 ? stage : "iteration/" + std::to_string(iteration) + "/" + stage);
}

std::vector<Iteration> iterative_distill(const pretrain::Encoder& poisoned, const data::LabeledDataset& clean_subset,
                                         const ExperimentConfig& config, std::size_t n_iterations,
                                         const std::function<void(const Iteration&)>& on_iteration) {
  if (n_iterations < 1) throw ValidationError("iterations", "must be at least 1");
  if (config.teacher_method != TeacherMethod::FT) {
    throw ValidationError("teacher_method", "iterative distillation uses fine-tuned teachers (FT)");
  }
  std::vector<Iteration> chain;
  for (std::size_t n = 0; n < n_iterations; ++n) {
    const pretrain::Encoder& parent = n == 0 ? poisoned : chain.back().student;
    pretrain::Encoder tea = teacher::make_teacher_ft(parent, clean_subset, teacher::finetune_hparams(config),
                                                     iteration_seed(config.seed, "teacher", n));
    pretrain::Encoder stu = n == 0 ? init_student(config.student_strategy, poisoned, clean_subset, config.warmup,
                                                  iteration_seed(config.seed, "student", 0))
                                   : parent;
    stu = distill(tea, stu, clean_subset, config.loss_kind, config.distill_epochs, config.optimizer, config.distill,
                  iteration_seed(config.seed, "distill", n));
    stu.metadata["iteration"] = n;
    tea.metadata["iteration"] = n;
    chain.push_back({n, std::move(tea), std::move(stu)});
    if (on_iteration) on_iteration(chain.back());
  }
  return chain;
}

}  // namespace bdkit::distill
