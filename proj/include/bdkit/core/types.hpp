// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bdkit/nn/tensor.hpp"

namespace bdkit {

enum class TeacherMethod { FT, FP, ANP, MOTH, NONE };
enum class StudentStrategy { RAW, VOID, WARMUP };
enum class LossKind { FITNETS, CC, AFD, ATD, SP, KD };
enum class AttackMethod { BADENCODER, BASSL };
enum class Split { TRAIN, TEST };
enum class ArtifactKind { ENCODER, CLASSIFIER, DATASET_SUBSET, METRICS };
/// Which end of the clean-activation ranking the fine-pruning teacher removes.
enum class PruneDirection { MOST_ACTIVE, LEAST_ACTIVE };

std::string_view to_string(TeacherMethod v);
std::string_view to_string(StudentStrategy v);
std::string_view to_string(LossKind v);
std::string_view to_string(AttackMethod v);
std::string_view to_string(Split v);
std::string_view to_string(ArtifactKind v);
std::string_view to_string(PruneDirection v);

// Parsers throw ValidationError(field, ...) on unknown names.
TeacherMethod parse_teacher_method(std::string_view s, const std::string& field = "teacher_method");
StudentStrategy parse_student_strategy(std::string_view s, const std::string& field = "student_strategy");
LossKind parse_loss_kind(std::string_view s, const std::string& field = "loss_kind");
AttackMethod parse_attack_method(std::string_view s, const std::string& field = "attack.method");
Split parse_split(std::string_view s, const std::string& field = "split");
ArtifactKind parse_artifact_kind(std::string_view s, const std::string& field = "kind");
PruneDirection parse_prune_direction(std::string_view s, const std::string& field = "teacher.prune_direction");

/// Pixel patch stamped onto images. The pattern is stored channel-major (C,H,W).
struct Trigger {
  nn::Tensor pattern;
  /// Top-left corner of the footprint. Negative values count from the far edge,
  /// so (-1,-1) places the patch flush with the bottom-right corner.
  std::array<long, 2> anchor{-1, -1};

  std::size_t channels() const { return pattern.dim(0); }
  std::size_t height() const { return pattern.dim(1); }
  std::size_t width() const { return pattern.dim(2); }

  /// Resolved top-left (row, col) on an image of the given size; throws GeometryError
  /// if the footprint does not fit.
  std::pair<std::size_t, std::size_t> origin(std::size_t image_h, std::size_t image_w) const;

  static Trigger solid(std::size_t height, std::size_t width, std::vector<double> color,
                       std::array<long, 2> anchor = {-1, -1});

  bool operator==(const Trigger&) const = default;
};

struct BadEncoderStrength {
  double lambda_effect = 1.0;
  double lambda_utility = 1.0;
  double shadow_fraction = 0.1;
  std::size_t reference_count = 3;
  bool operator==(const BadEncoderStrength&) const = default;
};

struct BasslStrength {
  double poison_ratio = 0.5;
  double migration_fraction = 0.6;
  bool operator==(const BasslStrength&) const = default;
};

struct AttackSpec {
  Trigger trigger = Trigger::solid(3, 3, {1.0, 1.0, 1.0});
  int target_class = 0;
  AttackMethod method = AttackMethod::BADENCODER;
  BadEncoderStrength badencoder;
  BasslStrength bassl;
  bool operator==(const AttackSpec&) const = default;
};

struct ArtifactRef {
  ArtifactKind kind = ArtifactKind::ENCODER;
  std::string path;
  /// (stage name, config hash); the first entry names the producing stage.
  std::vector<std::pair<std::string, std::string>> lineage;
  std::size_t iteration_index = 0;

  const std::string& producer() const { return lineage.front().first; }
  const std::string& hash() const { return lineage.front().second; }
  bool operator==(const ArtifactRef&) const = default;
};

}  // namespace bdkit
