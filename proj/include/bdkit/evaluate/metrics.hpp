// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bdkit/core/config.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::evaluate {

/// Anything that maps an (N,C,H,W) image batch to one label per image.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<int> predict(const nn::Tensor& images) const = 0;
};

/// Wraps a callable; handy for toy classifiers.
class FunctionPredictor final : public Predictor {
 public:
  explicit FunctionPredictor(std::function<std::vector<int>(const nn::Tensor&)> fn) : fn_(std::move(fn)) {}
  std::vector<int> predict(const nn::Tensor& images) const override { return fn_(images); }

 private:
  std::function<std::vector<int>(const nn::Tensor&)> fn_;
};

/// Row-wise argmax; ties go to the lowest index.
std::vector<int> argmax_rows(const nn::Tensor& scores);

/// MLP head (embedding -> 512 -> 256 -> classes, ReLU) on a frozen encoder.
/// Embeddings are L2-normalized before the first layer.
class Classifier final : public Predictor {
 public:
  static constexpr std::size_t kHidden1 = 512;
  static constexpr std::size_t kHidden2 = 256;

  Classifier(std::shared_ptr<const pretrain::Encoder> encoder, int num_classes, std::uint64_t seed);

  const pretrain::Encoder& encoder() const { return *encoder_; }
  int num_classes() const { return num_classes_; }
  std::vector<nn::Var>& parameters() { return params_; }
  const std::vector<nn::Var>& parameters() const { return params_; }
  std::vector<double> flat_parameters() const;

  /// Class scores for precomputed raw embeddings (N,D) -> (N,K).
  nn::Var head(const nn::Var& embeddings) const;
  std::vector<int> predict_embeddings(const nn::Tensor& embeddings) const;
  std::vector<int> predict(const nn::Tensor& images) const override;

 private:
  std::shared_ptr<const pretrain::Encoder> encoder_;
  int num_classes_;
  std::vector<nn::Var> params_;  // w1, b1, w2, b2, w3, b3
};

/// Cross-entropy training of the head with Adam; the encoder stays frozen.
Classifier train_downstream(std::shared_ptr<const pretrain::Encoder> encoder, const data::LabeledDataset& train_set,
                            const DownstreamHParams& hparams, std::uint64_t seed);

/// Fraction of correctly classified images. Empty set -> ValidationError.
double compute_acc(const Predictor& classifier, const data::LabeledDataset& test_set);
/// Fraction of trigger-stamped test images classified as the target (target-class images included).
double compute_asr(const Predictor& classifier, const data::LabeledDataset& test_set, const AttackSpec& spec);

/// alpha * acc + (1 - alpha) * log2(2 - asr); arguments outside [0,1] -> ValidationError.
double balanced_score(double acc, double asr, double alpha);

struct MetricsRecord {
  double acc = 0.0;
  double asr = 0.0;
  double bs = 0.0;
  double alpha = 0.5;
  std::vector<std::pair<std::string, std::string>> lineage;
  std::string downstream_dataset;
  std::uint64_t seed = 0;

  bool operator==(const MetricsRecord&) const = default;
};

/// Computes bs from (acc, asr, alpha).
MetricsRecord make_metrics(double acc, double asr, double alpha,
                           std::vector<std::pair<std::string, std::string>> lineage, std::string downstream_dataset,
                           std::uint64_t seed);

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);
void append_jsonl(const std::filesystem::path& path, const MetricsRecord& record);
std::vector<MetricsRecord> read_jsonl(const std::filesystem::path& path);

}  // namespace bdkit::evaluate
