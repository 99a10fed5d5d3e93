// SPDX-License-Identifier: Apache-2.0
//
// Directory-tree artifact cache. Every artifact lives under
//   <root>/<kind>/<stage>/<key>/
// where key is the SHA-256 of the canonical JSON of the stage inputs (parent keys
// included). manifest.json records those inputs, the lineage, and a SHA-256 per
// payload file; loads verify the payload hashes.
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdkit/core/types.hpp"

namespace bdkit::bench {

struct CacheStats {
  std::map<std::string, std::size_t> hits;
  std::map<std::string, std::size_t> misses;

  std::size_t total_hits() const;
  std::size_t total_misses() const;
};

class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  /// SHA-256 hex of inputs.dump() (object keys are sorted, so field order does not matter).
  static std::string key_of(const nlohmann::json& inputs);

  std::filesystem::path directory(ArtifactKind kind, const std::string& stage, const std::string& key) const;

  /// Returns the cached artifact for (kind, stage, inputs) or runs `produce` on an
  /// empty staging directory and publishes it atomically. The returned lineage
  /// starts with (stage, key) followed by the parents' lineage entries.
  /// Concurrent callers asking for the same key wait for one producer.
  ArtifactRef get_or_create(ArtifactKind kind, const std::string& stage, const nlohmann::json& inputs,
                            const std::vector<ArtifactRef>& parents, std::size_t iteration_index,
                            const std::function<void(const std::filesystem::path& dir)>& produce);

  /// Re-hashes every payload file against the manifest -> StaleArtifactError on mismatch.
  void verify(const ArtifactRef& ref) const;
  nlohmann::json manifest(const ArtifactRef& ref) const;

  CacheStats stats() const;
  void reset_stats();

  /// Receives one line per produced artifact (start and finish); for progress output.
  void set_logger(std::function<void(const std::string&)> logger) { logger_ = std::move(logger); }

 private:
  std::shared_ptr<std::mutex> key_lock(const std::string& key);
  ArtifactRef read_ref(const std::filesystem::path& dir) const;

  std::filesystem::path root_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  CacheStats stats_;
  std::function<void(const std::string&)> logger_;
};

}  // namespace bdkit::bench
