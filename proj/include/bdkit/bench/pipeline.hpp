// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bdkit/bench/store.hpp"
#include "bdkit/core/config.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/evaluate/metrics.hpp"
#include "bdkit/pretrain/encoder.hpp"

namespace bdkit::bench {

/// Stage-by-stage view of one experiment cell. Each accessor returns the cached
/// artifact or produces it (and everything upstream) on first use.
///
/// Stage seeds: clean pre-training and the attack use config.attack_seed(); the
/// clean subset, teacher, student, distillation and probe use config.seed.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, ArtifactStore& store);

  const ExperimentConfig& config() const { return config_; }
  const std::string& config_hash() const { return config_hash_; }

  /// (stage, hash) lineage roots for the two datasets.
  std::pair<std::string, std::string> pretrain_dataset_id();
  std::pair<std::string, std::string> downstream_dataset_id();

  ArtifactRef clean_encoder();     // BadEncoder only: contrastive pre-training on the pre-training set
  ArtifactRef poisoned_encoder();  // attack output
  ArtifactRef clean_subset();      // defender's clean_data_ratio slice of the pre-training train split
  ArtifactRef teacher(std::size_t iteration = 0);
  ArtifactRef student(std::size_t iteration = 0);
  ArtifactRef distilled(std::size_t iteration = 0);
  /// distilled(iterations - 1).
  ArtifactRef final_encoder();

  /// Downstream probe on the encoder artifact plus ACC/ASR/BS; cached.
  evaluate::MetricsRecord evaluate(const ArtifactRef& encoder);
  /// evaluate(final_encoder()).
  evaluate::MetricsRecord run();

  pretrain::Encoder load_encoder(const ArtifactRef& ref) const;
  data::LabeledDataset load_subset(const ArtifactRef& ref);

  ArtifactStore& store() { return store_; }

 private:
  const data::LabeledDataset& pretrain_train();
  const data::LabeledDataset& downstream(Split split);
  data::LoadOptions load_options() const;
  template <typename F>
  auto stage(const std::string& name, F&& body) -> decltype(body());

  ExperimentConfig config_;
  std::string config_hash_;
  ArtifactStore& store_;
  std::optional<data::LabeledDataset> pretrain_train_, down_train_, down_test_;
  std::optional<std::pair<std::string, std::string>> pretrain_id_, downstream_id_;
};

/// Full attack -> teacher -> student -> distill -> probe -> metrics run.
/// Stage failures become ExperimentError(stage, config hash); StaleArtifactError passes through.
evaluate::MetricsRecord run_experiment(const ExperimentConfig& config, ArtifactStore& store);
/// Same, using the store at artifact_root().
evaluate::MetricsRecord run_experiment(const ExperimentConfig& config);

/// Dataset identity hash: SHA-256 of manifest.json for on-disk datasets; for
/// SYNTH-TINY the hash of its generator parameters.
std::string dataset_manifest_hash(const std::string& name, const data::LoadOptions& options);

}  // namespace bdkit::bench
