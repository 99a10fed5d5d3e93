// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bdkit/core/types.hpp"
#include "bdkit/nn/tensor.hpp"

namespace bdkit::data {

/// Images stored as one (N,C,H,W) tensor with values in [0,1].
struct LabeledDataset {
  std::string name;
  Split split = Split::TRAIN;
  int num_classes = 0;
  nn::Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_size() const { return channels() * height() * width(); }

  std::span<const double> image_view(std::size_t i) const;
  nn::Tensor image(std::size_t i) const;  // (C,H,W)
  nn::Tensor batch(std::span<const std::size_t> indices) const;  // (B,C,H,W)
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> indices_of_class(int label) const;
};

/// Builds a dataset from per-image (C,H,W) tensors; all must share a shape.
LabeledDataset make_dataset(std::string name, Split split, int num_classes, const std::vector<nn::Tensor>& images,
                            std::vector<int> labels);

struct LoadOptions {
  std::filesystem::path root = "data";
  std::size_t synth_train_size = 1200;
  std::size_t synth_test_size = 300;
};

/// Loads a dataset from the documented on-disk layout (or generates SYNTH-TINY).
/// Unknown name -> ValidationError; missing/corrupt files -> DatasetError listing paths.
LabeledDataset load_dataset(const std::string& name, Split split, const LoadOptions& options = {});

/// Writes one split in the on-disk layout (docs/data_layout.md), creating or updating manifest.json.
void write_split(const std::filesystem::path& dataset_dir, const LabeledDataset& dataset);

/// Deterministic colored-shape generator: class 0 filled square, 1 plus sign, 2 ring,
/// each in a random color and position on a dark noisy background.
LabeledDataset generate_synth_tiny(Split split, std::size_t count, std::uint64_t seed);

/// Bilinear resize (C,H,W) -> (C,out_h,out_w), half-pixel centers.
nn::Tensor resize_bilinear(const nn::Tensor& image, std::size_t out_h, std::size_t out_w);

}  // namespace bdkit::data
