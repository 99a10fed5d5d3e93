// SPDX-License-Identifier: Apache-2.0
#include "bdkit/core/registry.hpp"

#include <algorithm>
#include <sstream>

#include "bdkit/core/error.hpp"

namespace bdkit {

const std::vector<DatasetInfo>& all_datasets() {
  static const std::vector<DatasetInfo> kDatasets{
      {"CIFAR10", 50000, 10000, 32, 32, 3, 10, 32, 32},
      {"STL10", 5000, 8000, 96, 96, 3, 10, 32, 32},
      {"GTSRB", 39209, 12630, 32, 32, 3, 43, 32, 32},
      {"SVHN", 73257, 26032, 32, 32, 3, 10, 32, 32},
      {kSynthTiny, 0, 0, 16, 16, 3, 3, 16, 16},
  };
  return kDatasets;
}

const DatasetInfo& dataset_info(const std::string& name) {
  for (const auto& d : all_datasets()) {
    if (d.name == name) return d;
  }
  throw ValidationError("dataset", "unsupported dataset '" + name + "'");
}

ArchSpec parse_architecture(const std::string& id) {
  ArchSpec spec;
  spec.id = id;
  if (id == "RN18" || id == "RN34") {
    spec.family = ArchSpec::Family::RESNET_BASIC;
    spec.widths = {64, 128, 256, 512};
    spec.blocks = id == "RN18" ? std::vector<std::size_t>{2, 2, 2, 2} : std::vector<std::size_t>{3, 4, 6, 3};
    spec.embedding_dim = 512;
    return spec;
  }
  if (id == "RN50") {
    spec.family = ArchSpec::Family::RESNET_BOTTLENECK;
    spec.widths = {64, 128, 256, 512};
    spec.blocks = {3, 4, 6, 3};
    spec.embedding_dim = 2048;
    return spec;
  }
  if (id == "tiny-cnn") {
    spec.widths = {16, 32};
    spec.embedding_dim = 32;
    return spec;
  }
  const std::string prefix = "tiny-cnn:";
  if (id.rfind(prefix, 0) == 0) {
    std::stringstream ss(id.substr(prefix.size()));
    std::vector<std::size_t> nums;
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
        nums.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw ValidationError("architecture", "bad tiny-cnn width '" + tok + "'");
      }
    }
    if (nums.size() != 2) throw ValidationError("architecture", "tiny-cnn takes <c1>,<c2>");
    spec.widths = {nums[0], nums[1]};
    spec.embedding_dim = nums[1];
    return spec;
  }
  throw ValidationError("architecture", "unknown architecture '" + id + "' (RN18, RN34, RN50, tiny-cnn)");
}

}  // namespace bdkit
