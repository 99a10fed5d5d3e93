// SPDX-License-Identifier: Apache-2.0
//
// Closed sets of dataset and architecture identifiers.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bdkit/core/types.hpp"

namespace bdkit {

inline constexpr const char* kSynthTiny = "SYNTH-TINY";

struct DatasetInfo {
  std::string name;
  std::size_t train_count = 0;  // 0 = configured (synthetic)
  std::size_t test_count = 0;
  std::size_t height = 0, width = 0, channels = 0;
  int num_classes = 0;
  /// Resolution images are resized to on load (STL10 -> pre-training resolution).
  std::size_t load_height = 0, load_width = 0;
};

/// Throws ValidationError("dataset", ...) for unknown names.
const DatasetInfo& dataset_info(const std::string& name);
const std::vector<DatasetInfo>& all_datasets();

struct ArchSpec {
  enum class Family { TINY_CNN, RESNET_BASIC, RESNET_BOTTLENECK };
  std::string id;
  Family family = Family::TINY_CNN;
  /// TINY_CNN: channel widths of the two conv stages. ResNet: per-stage widths.
  std::vector<std::size_t> widths;
  /// ResNet only: residual blocks per stage.
  std::vector<std::size_t> blocks;
  std::size_t embedding_dim = 0;

  std::size_t tap_count() const { return family == Family::TINY_CNN ? 2 : widths.size(); }
  bool operator==(const ArchSpec&) const = default;
};

/// Accepts RN18, RN34, RN50, tiny-cnn, and tiny-cnn:<c1>,<c2>
/// (the tiny embedding is the pooled second stage, so its dimension is c2).
ArchSpec parse_architecture(const std::string& id);

}  // namespace bdkit
