// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdkit/core/registry.hpp"
#include "bdkit/nn/autograd.hpp"

namespace bdkit::pretrain {

struct ParamGroup {
  std::string name;
  nn::Shape shape;
};

struct EncoderOutput {
  nn::Var embedding;           // (B, D)
  std::vector<nn::Var> taps;   // one (B, C, H, W) activation per stage
};

struct ForwardOptions {
  /// BatchNorm uses batch statistics and updates running estimates.
  bool training = false;
  /// Optional per-tap channel multipliers (ANP perturbation); empty = none.
  std::vector<nn::Var> tap_scales;
};

/// Image encoder with named parameter groups and one tap per stage.
///
/// tiny-cnn: [conv3x3+ReLU+avgpool2] x2 -> global pool (embedding dim = c2).
/// RN18/34/50: CIFAR-style ResNet (3x3 stem, no max-pool), BatchNorm, embedding
/// is the globally pooled stage-4 output. Copies are deep.
class Encoder {
 public:
  /// Seeded initialization: Kaiming-normal convs, BN gamma=1 beta=0.
  static Encoder create(const std::string& architecture, std::uint64_t seed);

  Encoder(const Encoder& other);
  Encoder& operator=(const Encoder& other);
  Encoder(Encoder&&) noexcept = default;
  Encoder& operator=(Encoder&&) noexcept = default;

  const std::string& architecture() const { return arch_.id; }
  const ArchSpec& spec() const { return arch_; }
  std::size_t embedding_dim() const { return arch_.embedding_dim; }
  std::size_t tap_count() const { return tap_channels_.size(); }
  std::size_t tap_channels(std::size_t tap) const { return tap_channels_.at(tap); }

  const std::vector<ParamGroup>& groups() const { return groups_; }
  std::vector<nn::Var>& parameters() { return params_; }
  const std::vector<nn::Var>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_trainable(bool trainable);

  /// BatchNorm running statistics, two entries (mean, var) per BN layer.
  const std::vector<nn::Tensor>& buffers() const { return buffers_; }

  /// Per-tap channel masks (1 keeps, 0 prunes); applied to the stage output.
  const std::vector<nn::Tensor>& tap_masks() const { return masks_; }
  void set_tap_mask(std::size_t tap, nn::Tensor mask);

  EncoderOutput forward(const nn::Var& images, const ForwardOptions& options = {});
  /// Eval-mode forward; never touches running statistics.
  EncoderOutput forward(const nn::Tensor& images) const;
  /// Eval-mode embeddings computed in chunks to bound memory.
  nn::Tensor embed(const nn::Tensor& images, std::size_t chunk = 256) const;

  /// SHA-256 over architecture, parameters, buffers, and masks (metadata excluded).
  std::string hash() const;

  /// Free-form provenance: lineage, strategy tags, loss trace.
  nlohmann::json metadata = nlohmann::json::object();

  void save(const std::filesystem::path& path) const;
  static Encoder load(const std::filesystem::path& path);

 private:
  Encoder() = default;
  EncoderOutput run(const nn::Var& x, bool training, bool update_stats, const std::vector<nn::Var>& tap_scales);

  ArchSpec arch_;
  std::vector<ParamGroup> groups_;
  std::vector<nn::Var> params_;
  std::vector<nn::Tensor> buffers_;
  std::vector<nn::Tensor> masks_;
  std::vector<std::size_t> tap_channels_;
};

/// Parameter count of an architecture without instantiating it.
std::size_t parameter_count(const std::string& architecture);

}  // namespace bdkit::pretrain
