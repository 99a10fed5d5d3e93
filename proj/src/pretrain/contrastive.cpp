// SPDX-License-Identifier: Apache-2.0
#include "bdkit/pretrain/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "bdkit/core/error.hpp"
#include "bdkit/data/augment.hpp"
#include "bdkit/nn/adam.hpp"
#include "bdkit/nn/ops.hpp"

namespace bdkit::pretrain {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Loss on already-normalized rows z (2B, D); row i's positive is (i + B) mod 2B.
nn::Var nt_xent_normalized(const nn::Var& z, double temperature) {
  const std::size_t n = z.dim(0), d = z.dim(1), half = n / 2;
  Eigen::Map<const Mat> zm(z.value().data(), static_cast<long>(n), static_cast<long>(d));
  Mat s = zm * zm.transpose() / temperature;
  Mat g = Mat::Zero(static_cast<long>(n), static_cast<long>(n));  // dL/ds
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const long r = static_cast<long>(i);
    const long pos = static_cast<long>((i + half) % n);
    double mx = -INFINITY;
    for (long k = 0; k < static_cast<long>(n); ++k)
      if (k != r) mx = std::max(mx, s(r, k));
    double denom = 0.0;
    for (long k = 0; k < static_cast<long>(n); ++k)
      if (k != r) denom += std::exp(s(r, k) - mx);
    loss += -s(r, pos) + mx + std::log(denom);
    for (long k = 0; k < static_cast<long>(n); ++k)
      if (k != r) g(r, k) = std::exp(s(r, k) - mx) / denom / static_cast<double>(n);
    g(r, pos) -= 1.0 / static_cast<double>(n);
  }
  loss /= static_cast<double>(n);
  return nn::Var::make(nn::Tensor::scalar(loss), {z}, [g = std::move(g), temperature, n, d](nn::Node& node) {
    nn::Node& in = *node.inputs[0];
    if (!in.requires_grad) return;
    Eigen::Map<const Mat> zm(in.value.data(), static_cast<long>(n), static_cast<long>(d));
    Eigen::Map<Mat> gz(in.grad_buffer().data(), static_cast<long>(n), static_cast<long>(d));
    gz.noalias() += node.grad[0] / temperature * (g + g.transpose()) * zm;
  });
}

}  // namespace

nn::Var nt_xent_loss(const nn::Var& a, const nn::Var& b, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature", "must be > 0");
  if (a.value().rank() != 2 || a.shape() != b.shape()) {
    throw GeometryError("nt_xent expects two (B,D) matrices of equal shape");
  }
  if (a.dim(0) < 2) throw BatchTooSmallError("nt_xent needs B >= 2, got " + std::to_string(a.dim(0)));
  return nt_xent_normalized(nn::l2_normalize_rows(nn::concat_rows(a, b)), temperature);
}

Encoder initial_encoder(const std::string& architecture, std::uint64_t seed) {
  Encoder e = Encoder::create(architecture, derive_seed(seed, "init"));
  e.metadata["init_seed"] = seed;
  return e;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::size_t min_batch,
                                                    Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t s = 0; s < n; s += bs) {
    const std::size_t e = std::min(n, s + bs);
    if (e - s < min_batch && !out.empty()) break;
    out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(e));
  }
  return out;
}

std::vector<double> contrastive_train(Encoder& encoder, const data::LabeledDataset& dataset,
                                      const PretrainHParams& hparams, std::uint64_t seed, const std::string& stage,
                                      const ContrastiveExtra& extra) {
  std::vector<double> trace;
  if (hparams.epochs == 0) return trace;
  if (dataset.size() < 2) throw BatchTooSmallError(stage + ": contrastive training needs at least 2 images");
  const data::AugmentPolicy policy = data::augment_policy(hparams.augmentation);
  Rng rng(derive_seed(seed, stage + "/batches"));
  encoder.set_trainable(true);
  nn::Adam opt(encoder.parameters(), {.learning_rate = hparams.learning_rate});
  for (std::size_t epoch = 0; epoch < hparams.epochs; ++epoch) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& idx : epoch_batches(dataset.size(), hparams.batch_size, 2, rng)) {
      if (idx.size() < 2) continue;
      const nn::Tensor clean = dataset.batch(idx);
      const nn::Tensor va = data::augment_batch(clean, policy, rng);
      const nn::Tensor vb = data::augment_batch(clean, policy, rng);
      nn::Tensor both({2 * idx.size(), clean.dim(1), clean.dim(2), clean.dim(3)});
      std::copy_n(va.data(), va.size(), both.data());
      std::copy_n(vb.data(), vb.size(), both.data() + va.size());
      const nn::Var z = encoder.forward(nn::Var(both), {.training = true}).embedding;
      const std::size_t b = idx.size();
      std::vector<std::size_t> first(b), second(b);
      std::iota(first.begin(), first.end(), 0);
      std::iota(second.begin(), second.end(), b);
      nn::Var loss = nt_xent_loss(nn::select_rows(z, first), nn::select_rows(z, second), hparams.temperature);
      if (extra) loss = nn::add(loss, extra(encoder, clean));
      const double v = loss.value().item();
      if (!std::isfinite(v)) {
        encoder.set_trainable(false);
        throw TrainingError(stage, epoch);
      }
      nn::backward(loss);
      opt.step();
      total += v;
      ++count;
    }
    trace.push_back(count ? total / static_cast<double>(count) : 0.0);
  }
  encoder.set_trainable(false);
  return trace;
}

Encoder contrastive_pretrain(const data::LabeledDataset& dataset, const std::string& architecture,
                             const PretrainHParams& hparams, std::uint64_t seed) {
  if (dataset.empty()) throw DatasetError("contrastive_pretrain: empty dataset");
  Encoder e = initial_encoder(architecture, seed);
  e.metadata["loss_trace"] = contrastive_train(e, dataset, hparams, seed, "pretrain");
  e.metadata["stage"] = "pretrain";
  return e;
}

Encoder warm_up_train(const data::LabeledDataset& clean_subset, const std::string& architecture,
                      const PretrainHParams& hparams, std::uint64_t seed) {
  if (clean_subset.empty()) throw DatasetError("warm_up_train: empty clean subset");
  Encoder e = initial_encoder(architecture, seed);
  e.metadata["loss_trace"] = contrastive_train(e, clean_subset, hparams, seed, "warmup");
  e.metadata["strategy"] = "WARMUP";
  return e;
}

}  // namespace bdkit::pretrain
