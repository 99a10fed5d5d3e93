// SPDX-License-Identifier: Apache-2.0
#include "bdkit/bench/store.hpp"

#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"

namespace bdkit::bench {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw StaleArtifactError("corrupt manifest " + p.string() + ": " + e.what());
  }
}

}  // namespace

std::size_t CacheStats::total_hits() const {
  std::size_t n = 0;
  for (const auto& [_, v] : hits) n += v;
  return n;
}

std::size_t CacheStats::total_misses() const {
  std::size_t n = 0;
  for (const auto& [_, v] : misses) n += v;
  return n;
}

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {}

std::string ArtifactStore::key_of(const nlohmann::json& inputs) { return sha256_hex(inputs.dump()); }

fs::path ArtifactStore::directory(ArtifactKind kind, const std::string& stage, const std::string& key) const {
  std::string k(to_string(kind));
  for (auto& c : k) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return root_ / k / stage / key;
}

std::shared_ptr<std::mutex> ArtifactStore::key_lock(const std::string& key) {
  std::lock_guard<std::mutex> g(mu_);
  auto& slot = locks_[key];
  if (!slot) slot = std::make_shared<std::mutex>();
  return slot;
}

ArtifactRef ArtifactStore::read_ref(const fs::path& dir) const {
  const nlohmann::json m = read_json(dir / kManifest);
  ArtifactRef ref;
  ref.kind = parse_artifact_kind(m.at("kind").get<std::string>());
  ref.path = dir.string();
  for (const auto& e : m.at("lineage")) ref.lineage.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
  ref.iteration_index = m.at("iteration_index").get<std::size_t>();
  return ref;
}

ArtifactRef ArtifactStore::get_or_create(ArtifactKind kind, const std::string& stage, const nlohmann::json& inputs,
                                         const std::vector<ArtifactRef>& parents, std::size_t iteration_index,
                                         const std::function<void(const fs::path& dir)>& produce) {
  const std::string key = key_of(inputs);
  const fs::path dir = directory(kind, stage, key);
  const auto lock = key_lock(key);
  std::lock_guard<std::mutex> g(*lock);

  if (fs::exists(dir / kManifest)) {
    const nlohmann::json m = read_json(dir / kManifest);
    if (m.at("inputs") != inputs) {
      throw StaleArtifactError("artifact " + dir.string() + " was produced from different inputs");
    }
    ArtifactRef ref = read_ref(dir);
    verify(ref);
    std::lock_guard<std::mutex> s(mu_);
    ++stats_.hits[stage];
    return ref;
  }

  std::ostringstream tid;
  tid << std::this_thread::get_id();
  const fs::path staging = dir.parent_path() / (key + ".tmp-" + tid.str());
  fs::remove_all(staging);
  fs::create_directories(staging);
  const auto started = std::chrono::steady_clock::now();
  if (logger_) logger_(stage + " " + key.substr(0, 12) + ": computing");
  try {
    produce(staging);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }

  std::vector<std::pair<std::string, std::string>> lineage{{stage, key}};
  for (const auto& p : parents) {
    for (const auto& e : p.lineage) {
      if (std::find(lineage.begin(), lineage.end(), e) == lineage.end()) lineage.push_back(e);
    }
  }
  nlohmann::json files = nlohmann::json::object();
  for (const auto& entry : fs::directory_iterator(staging)) {
    if (entry.is_regular_file()) files[entry.path().filename().string()] = sha256_file_hex(entry.path().string());
  }
  nlohmann::json lin = nlohmann::json::array();
  for (const auto& [s, h] : lineage) lin.push_back({s, h});
  const nlohmann::json manifest = {{"kind", std::string(to_string(kind))},
                                   {"stage", stage},
                                   {"key", key},
                                   {"inputs", inputs},
                                   {"lineage", lin},
                                   {"iteration_index", iteration_index},
                                   {"files", files},
                                   {"created", utc_now()}};
  {
    std::ofstream out(staging / kManifest);
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write manifest in " + staging.string());
  }
  fs::remove_all(dir);
  fs::rename(staging, dir);
  if (logger_) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", secs);
    logger_(stage + " " + key.substr(0, 12) + ": done in " + buf + " s");
  }
  {
    std::lock_guard<std::mutex> s(mu_);
    ++stats_.misses[stage];
  }
  return read_ref(dir);
}

void ArtifactStore::verify(const ArtifactRef& ref) const {
  const fs::path dir(ref.path);
  const nlohmann::json m = read_json(dir / kManifest);
  for (const auto& [name, digest] : m.at("files").items()) {
    const fs::path f = dir / name;
    if (!fs::exists(f)) throw StaleArtifactError("artifact file missing: " + f.string());
    if (sha256_file_hex(f.string()) != digest.get<std::string>()) {
      throw StaleArtifactError("artifact file changed since it was written: " + f.string());
    }
  }
}

nlohmann::json ArtifactStore::manifest(const ArtifactRef& ref) const {
  return read_json(fs::path(ref.path) / kManifest);
}

CacheStats ArtifactStore::stats() const {
  std::lock_guard<std::mutex> g(mu_);
  return stats_;
}

void ArtifactStore::reset_stats() {
  std::lock_guard<std::mutex> g(mu_);
  stats_ = {};
}

}  // namespace bdkit::bench
