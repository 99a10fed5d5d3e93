// SPDX-License-Identifier: Apache-2.0
#include "bdkit/core/types.hpp"

#include <algorithm>

#include "bdkit/core/error.hpp"

namespace bdkit {

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<E, std::string_view>, N>& table, const std::string& field) {
  std::string upper(s);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  std::replace(upper.begin(), upper.end(), '-', '_');
  for (const auto& [value, name] : table) {
    if (upper == name) return value;
  }
  std::string allowed;
  for (const auto& [value, name] : table) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw ValidationError(field, "'" + std::string(s) + "' is not one of {" + allowed + "}");
}

template <class E, std::size_t N>
std::string_view name_of(E v, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [value, name] : table) {
    if (value == v) return name;
  }
  return "?";
}

constexpr std::array<std::pair<TeacherMethod, std::string_view>, 5> kTeacher{{{TeacherMethod::FT, "FT"},
                                                                             {TeacherMethod::FP, "FP"},
                                                                             {TeacherMethod::ANP, "ANP"},
                                                                             {TeacherMethod::MOTH, "MOTH"},
                                                                             {TeacherMethod::NONE, "NONE"}}};
constexpr std::array<std::pair<StudentStrategy, std::string_view>, 3> kStudent{
    {{StudentStrategy::RAW, "RAW"}, {StudentStrategy::VOID, "VOID"}, {StudentStrategy::WARMUP, "WARMUP"}}};
constexpr std::array<std::pair<LossKind, std::string_view>, 6> kLoss{{{LossKind::FITNETS, "FITNETS"},
                                                                     {LossKind::CC, "CC"},
                                                                     {LossKind::AFD, "AFD"},
                                                                     {LossKind::ATD, "ATD"},
                                                                     {LossKind::SP, "SP"},
                                                                     {LossKind::KD, "KD"}}};
constexpr std::array<std::pair<AttackMethod, std::string_view>, 2> kAttack{
    {{AttackMethod::BADENCODER, "BADENCODER"}, {AttackMethod::BASSL, "BASSL"}}};
constexpr std::array<std::pair<Split, std::string_view>, 2> kSplit{{{Split::TRAIN, "TRAIN"}, {Split::TEST, "TEST"}}};
constexpr std::array<std::pair<ArtifactKind, std::string_view>, 4> kArtifact{{{ArtifactKind::ENCODER, "ENCODER"},
                                                                             {ArtifactKind::CLASSIFIER, "CLASSIFIER"},
                                                                             {ArtifactKind::DATASET_SUBSET, "DATASET_SUBSET"},
                                                                             {ArtifactKind::METRICS, "METRICS"}}};
constexpr std::array<std::pair<PruneDirection, std::string_view>, 2> kPrune{
    {{PruneDirection::MOST_ACTIVE, "MOST_ACTIVE"}, {PruneDirection::LEAST_ACTIVE, "LEAST_ACTIVE"}}};

}  // namespace

std::string_view to_string(TeacherMethod v) { return name_of(v, kTeacher); }
std::string_view to_string(StudentStrategy v) { return name_of(v, kStudent); }
std::string_view to_string(LossKind v) { return name_of(v, kLoss); }
std::string_view to_string(AttackMethod v) { return name_of(v, kAttack); }
std::string_view to_string(Split v) { return name_of(v, kSplit); }
std::string_view to_string(ArtifactKind v) { return name_of(v, kArtifact); }
std::string_view to_string(PruneDirection v) { return name_of(v, kPrune); }

TeacherMethod parse_teacher_method(std::string_view s, const std::string& f) { return parse_enum(s, kTeacher, f); }
StudentStrategy parse_student_strategy(std::string_view s, const std::string& f) { return parse_enum(s, kStudent, f); }
LossKind parse_loss_kind(std::string_view s, const std::string& f) { return parse_enum(s, kLoss, f); }
AttackMethod parse_attack_method(std::string_view s, const std::string& f) { return parse_enum(s, kAttack, f); }
Split parse_split(std::string_view s, const std::string& f) { return parse_enum(s, kSplit, f); }
ArtifactKind parse_artifact_kind(std::string_view s, const std::string& f) { return parse_enum(s, kArtifact, f); }
PruneDirection parse_prune_direction(std::string_view s, const std::string& f) { return parse_enum(s, kPrune, f); }

std::pair<std::size_t, std::size_t> Trigger::origin(std::size_t image_h, std::size_t image_w) const {
  const long h = static_cast<long>(height()), w = static_cast<long>(width());
  const long ih = static_cast<long>(image_h), iw = static_cast<long>(image_w);
  const long row = anchor[0] >= 0 ? anchor[0] : ih - h + 1 + anchor[0];
  const long col = anchor[1] >= 0 ? anchor[1] : iw - w + 1 + anchor[1];
  if (h < 1 || w < 1 || row < 0 || col < 0 || row + h > ih || col + w > iw) {
    throw GeometryError("trigger " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(anchor[0]) +
                        "," + std::to_string(anchor[1]) + ") does not fit a " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) + " image");
  }
  return {static_cast<std::size_t>(row), static_cast<std::size_t>(col)};
}

Trigger Trigger::solid(std::size_t height, std::size_t width, std::vector<double> color, std::array<long, 2> anchor) {
  if (height == 0 || width == 0) throw GeometryError("trigger size must be at least 1x1");
  Trigger t;
  t.anchor = anchor;
  t.pattern = nn::Tensor({color.size(), height, width});
  for (std::size_t c = 0; c < color.size(); ++c) {
    if (color[c] < 0.0 || color[c] > 1.0) throw ValidationError("attack.trigger.color", "values must lie in [0,1]");
    for (std::size_t i = 0; i < height * width; ++i) t.pattern[c * height * width + i] = color[c];
  }
  return t;
}

}  // namespace bdkit
