// SPDX-License-Identifier: Apache-2.0
#include "bdkit/evaluate/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/poison.hpp"
#include "bdkit/nn/adam.hpp"
#include "bdkit/nn/ops.hpp"
#include "bdkit/pretrain/contrastive.hpp"

namespace bdkit::evaluate {

namespace {

constexpr std::size_t kChunk = 256;

nn::Var uniform_param(nn::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-bound, bound);
  nn::Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = d(rng);
  return nn::Var(std::move(t), false);
}

template <typename F>
std::vector<int> predict_in_chunks(std::size_t n, F&& batch_of) {
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; s += kChunk) {
    std::vector<std::size_t> idx(std::min(n, s + kChunk) - s);
    std::iota(idx.begin(), idx.end(), s);
    const auto p = batch_of(idx);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace

std::vector<int> argmax_rows(const nn::Tensor& scores) {
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (scores[i * k + j] > scores[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Classifier::Classifier(std::shared_ptr<const pretrain::Encoder> encoder, int num_classes, std::uint64_t seed)
    : encoder_(std::move(encoder)), num_classes_(num_classes) {
  if (num_classes < 1) throw ValidationError("num_classes", "must be >= 1");
  Rng rng(seed);
  const std::size_t d = encoder_->embedding_dim(), k = static_cast<std::size_t>(num_classes);
  params_.push_back(uniform_param({kHidden1, d}, d, rng));
  params_.push_back(uniform_param({kHidden1}, d, rng));
  params_.push_back(uniform_param({kHidden2, kHidden1}, kHidden1, rng));
  params_.push_back(uniform_param({kHidden2}, kHidden1, rng));
  params_.push_back(uniform_param({k, kHidden2}, kHidden2, rng));
  params_.push_back(uniform_param({k}, kHidden2, rng));
}

std::vector<double> Classifier::flat_parameters() const {
  std::vector<double> out;
  for (const auto& p : params_) out.insert(out.end(), p.value().values().begin(), p.value().values().end());
  return out;
}

nn::Var Classifier::head(const nn::Var& z) const {
  nn::Var h = nn::relu(nn::linear(nn::l2_normalize_rows(z), params_[0], params_[1]));
  h = nn::relu(nn::linear(h, params_[2], params_[3]));
  return nn::linear(h, params_[4], params_[5]);
}

std::vector<int> Classifier::predict_embeddings(const nn::Tensor& embeddings) const {
  return argmax_rows(head(nn::Var(embeddings)).value());
}

std::vector<int> Classifier::predict(const nn::Tensor& images) const {
  return predict_embeddings(encoder_->embed(images));
}

Classifier train_downstream(std::shared_ptr<const pretrain::Encoder> encoder, const data::LabeledDataset& train_set,
                            const DownstreamHParams& hparams, std::uint64_t seed) {
  if (train_set.split != Split::TRAIN) throw ValidationError("split", "downstream training requires the TRAIN split");
  Classifier clf(encoder, train_set.num_classes, derive_seed(seed, "probe/init"));
  if (hparams.epochs == 0 || train_set.empty()) return clf;
  const nn::Tensor emb = encoder->embed(train_set.images);
  const std::size_t d = emb.dim(1);
  for (auto& p : clf.parameters()) p.node()->requires_grad = true;
  nn::Adam opt(clf.parameters(), {.learning_rate = hparams.learning_rate});
  Rng rng(derive_seed(seed, "probe/batches"));
  for (std::size_t epoch = 0; epoch < hparams.epochs; ++epoch) {
    for (const auto& idx : pretrain::epoch_batches(train_set.size(), hparams.batch_size, 1, rng)) {
      nn::Tensor zb({idx.size(), d});
      for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(emb.data() + idx[r] * d, d, zb.data() + r * d);
      const nn::Var loss = nn::cross_entropy(clf.head(nn::Var(zb)), train_set.batch_labels(idx));
      if (!std::isfinite(loss.value().item())) throw TrainingError("downstream", epoch);
      nn::backward(loss);
      opt.step();
    }
  }
  for (auto& p : clf.parameters()) {
    p.node()->requires_grad = false;
    p.node()->grad = nn::Tensor();
  }
  return clf;
}

double compute_acc(const Predictor& classifier, const data::LabeledDataset& test_set) {
  if (test_set.empty()) throw ValidationError("test_set", "ACC of an empty set is undefined");
  const auto pred = predict_in_chunks(test_set.size(), [&](const auto& idx) {
    return classifier.predict(test_set.batch(idx));
  });
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test_set.labels[i];
  return static_cast<double>(hit) / static_cast<double>(test_set.size());
}

double compute_asr(const Predictor& classifier, const data::LabeledDataset& test_set, const AttackSpec& spec) {
  if (test_set.empty()) throw ValidationError("test_set", "ASR of an empty set is undefined");
  // Non-owning alias; the view does not outlive this call.
  const auto base = std::shared_ptr<const data::LabeledDataset>(&test_set, [](const data::LabeledDataset*) {});
  const data::PoisonedEvalSet view = data::make_poisoned_eval_set(base, spec);
  const auto pred = predict_in_chunks(view.size(), [&](const auto& idx) { return classifier.predict(view.batch(idx)); });
  std::size_t hit = 0;
  for (int p : pred) hit += p == spec.target_class;
  return static_cast<double>(hit) / static_cast<double>(view.size());
}

double balanced_score(double acc, double asr, double alpha) {
  auto check = [](double v, const char* field) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(field, "must lie in [0,1], got " + std::to_string(v));
  };
  check(acc, "acc");
  check(asr, "asr");
  check(alpha, "alpha");
  return alpha * acc + (1.0 - alpha) * std::log2(2.0 - asr);
}

MetricsRecord make_metrics(double acc, double asr, double alpha,
                           std::vector<std::pair<std::string, std::string>> lineage, std::string downstream_dataset,
                           std::uint64_t seed) {
  MetricsRecord r;
  r.acc = acc;
  r.asr = asr;
  r.alpha = alpha;
  r.bs = balanced_score(acc, asr, alpha);
  r.lineage = std::move(lineage);
  r.downstream_dataset = std::move(downstream_dataset);
  r.seed = seed;
  return r;
}

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json lineage = nlohmann::json::array();
  for (const auto& [stage, hash] : r.lineage) lineage.push_back({{"stage", stage}, {"hash", hash}});
  return {{"acc", r.acc},     {"asr", r.asr},   {"bs", r.bs},
          {"alpha", r.alpha}, {"lineage", lineage}, {"downstream_dataset", r.downstream_dataset},
          {"seed", r.seed}};
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.acc = j.at("acc").get<double>();
  r.asr = j.at("asr").get<double>();
  r.bs = j.at("bs").get<double>();
  r.alpha = j.at("alpha").get<double>();
  for (const auto& e : j.at("lineage")) r.lineage.emplace_back(e.at("stage"), e.at("hash"));
  r.downstream_dataset = j.at("downstream_dataset").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

void append_jsonl(const std::filesystem::path& path, const MetricsRecord& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << to_json(record).dump() << "\n";
}

std::vector<MetricsRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(metrics_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace bdkit::evaluate
