// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration. The on-disk format is YAML with a closed schema:
// every key must exist in the defaults below, unknown keys are rejected, and
// omitted keys keep their defaults. See docs/config.md for the schema.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdkit/core/types.hpp"

namespace bdkit {

struct OptimizerHParams {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  bool operator==(const OptimizerHParams&) const = default;
};

struct PretrainHParams {
  std::size_t epochs = 300;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  double temperature = 0.5;
  std::string augmentation = "simclr";
  bool operator==(const PretrainHParams&) const = default;
};

struct DataOptions {
  /// Dataset root; empty means $BDKIT_DATA_ROOT.
  std::string root;
  std::size_t synth_train_size = 1200;
  std::size_t synth_test_size = 300;
  bool operator==(const DataOptions&) const = default;
};

struct TriggerConfig {
  std::array<std::size_t, 2> size{3, 3};
  std::vector<double> color{1.0, 1.0, 1.0};
  std::array<long, 2> anchor{-1, -1};
  bool operator==(const TriggerConfig&) const = default;
};

struct AttackConfig {
  AttackMethod method = AttackMethod::BADENCODER;
  int target_class = 0;
  TriggerConfig trigger;
  BadEncoderStrength badencoder;
  BasslStrength bassl;
  /// Optimizer schedule of the BadEncoder fine-tune.
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  bool operator==(const AttackConfig&) const = default;
};

struct TeacherHParams {
  std::size_t finetune_epochs = 100;
  double finetune_learning_rate = 1e-3;
  double prune_fraction = 0.1;
  PruneDirection prune_direction = PruneDirection::MOST_ACTIVE;
  double anp_budget = 0.4;
  std::size_t anp_batches = 4;
  std::size_t inversion_steps = 200;
  double inversion_learning_rate = 0.1;
  double mask_l1_weight = 1e-3;
  std::size_t unlearn_epochs = 100;
  bool operator==(const TeacherHParams&) const = default;
};

struct DistillHParams {
  double attention_p = 2.0;
  double kd_temperature = 4.0;
  bool kd_include_taps = true;
  /// One augmented view per step, shared by teacher and student.
  std::string augmentation = "simclr";
  bool operator==(const DistillHParams&) const = default;
};

struct DownstreamHParams {
  std::size_t epochs = 500;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  bool operator==(const DownstreamHParams&) const = default;
};

struct ExperimentConfig {
  std::string pretrain_dataset = "CIFAR10";
  std::string downstream_dataset = "GTSRB";
  std::string architecture = "RN18";
  AttackConfig attack;
  TeacherMethod teacher_method = TeacherMethod::FT;
  StudentStrategy student_strategy = StudentStrategy::WARMUP;
  LossKind loss_kind = LossKind::ATD;
  std::size_t distill_epochs = 500;
  double clean_data_ratio = 0.05;
  std::size_t iterations = 1;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  /// Seed of clean pre-training and the attack; -1 means use `seed`. Lets several
  /// defense seeds share one poisoned encoder.
  std::int64_t upstream_seed = -1;
  OptimizerHParams optimizer;
  DataOptions data;
  PretrainHParams pretrain;
  PretrainHParams warmup;
  TeacherHParams teacher;
  DistillHParams distill;
  DownstreamHParams downstream;

  AttackSpec attack_spec() const;
  std::uint64_t attack_seed() const { return upstream_seed < 0 ? seed : static_cast<std::uint64_t>(upstream_seed); }
  bool operator==(const ExperimentConfig&) const = default;
};

/// Throws ValidationError naming the first offending field.
void validate(const ExperimentConfig& config);

ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& yaml_text);
std::string serialize_config(const ExperimentConfig& config);

/// Applies "dotted.key=value" overrides (CLI style) with the same schema checks as the file loader.
ExperimentConfig apply_overrides(const ExperimentConfig& config, const std::vector<std::string>& overrides);

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// SHA-256 hex of the canonical (key-sorted) JSON form; independent of field order in files.
std::string config_hash(const ExperimentConfig& config);

/// Dataset root resolution: config value, else $BDKIT_DATA_ROOT, else ./data.
std::filesystem::path data_root(const ExperimentConfig& config);
/// Artifact root: $BDKIT_ARTIFACT_ROOT, else ./artifacts.
std::filesystem::path artifact_root();

}  // namespace bdkit
