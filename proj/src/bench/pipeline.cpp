// SPDX-License-Identifier: Apache-2.0
#include "bdkit/bench/pipeline.hpp"

#include <cstdio>
#include <fstream>

#include "bdkit/attack/attack.hpp"
#include "bdkit/core/error.hpp"
#include "bdkit/core/registry.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/poison.hpp"
#include "bdkit/distill/distill.hpp"
#include "bdkit/pretrain/contrastive.hpp"
#include "bdkit/teacher/teacher.hpp"

namespace bdkit::bench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kEncoderFile = "encoder.bdk";

void save_encoder(const fs::path& dir, const pretrain::Encoder& e) {
  e.save(dir / kEncoderFile);
  if (e.metadata.contains("loss_trace")) {
    std::ofstream out(dir / "loss_trace.csv");
    out << "epoch,loss\n";
    std::size_t i = 0;
    for (const auto& v : e.metadata["loss_trace"]) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
      out << i++ << "," << buf << "\n";
    }
  }
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + p.string());
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  return json::parse(in);
}

ArtifactRef dataset_ref(const std::pair<std::string, std::string>& id) {
  ArtifactRef r;
  r.kind = ArtifactKind::DATASET_SUBSET;
  r.lineage = {id};
  return r;
}

json pretrain_json(const PretrainHParams& h) {
  return {{"epochs", h.epochs},
          {"learning_rate", h.learning_rate},
          {"batch_size", h.batch_size},
          {"temperature", h.temperature},
          {"augmentation", h.augmentation}};
}

}  // namespace

std::string dataset_manifest_hash(const std::string& name, const data::LoadOptions& options) {
  const DatasetInfo& info = dataset_info(name);
  if (info.name == kSynthTiny) {
    const json gen = {{"name", info.name},
                      {"generator", "synth-tiny/1"},
                      {"train", options.synth_train_size},
                      {"test", options.synth_test_size}};
    return sha256_hex(gen.dump());
  }
  const fs::path manifest = options.root / info.name / "manifest.json";
  if (!fs::exists(manifest)) throw DatasetError("missing dataset manifest: " + manifest.string());
  return sha256_file_hex(manifest.string());
}

Pipeline::Pipeline(ExperimentConfig config, ArtifactStore& store)
    : config_(std::move(config)), store_(store) {
  validate(config_);
  config_hash_ = bdkit::config_hash(config_);
}

template <typename F>
auto Pipeline::stage(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StaleArtifactError&) {
    throw;
  } catch (const ExperimentError&) {
    throw;
  } catch (const std::exception& e) {
    throw ExperimentError(name, config_hash_, e.what());
  }
}

data::LoadOptions Pipeline::load_options() const {
  data::LoadOptions o;
  o.root = data_root(config_);
  o.synth_train_size = config_.data.synth_train_size;
  o.synth_test_size = config_.data.synth_test_size;
  return o;
}

std::pair<std::string, std::string> Pipeline::pretrain_dataset_id() {
  if (!pretrain_id_) {
    pretrain_id_ = stage("data", [&] {
      return std::make_pair("dataset:" + config_.pretrain_dataset,
                            dataset_manifest_hash(config_.pretrain_dataset, load_options()));
    });
  }
  return *pretrain_id_;
}

std::pair<std::string, std::string> Pipeline::downstream_dataset_id() {
  if (!downstream_id_) {
    downstream_id_ = stage("data", [&] {
      return std::make_pair("dataset:" + config_.downstream_dataset,
                            dataset_manifest_hash(config_.downstream_dataset, load_options()));
    });
  }
  return *downstream_id_;
}

const data::LabeledDataset& Pipeline::pretrain_train() {
  if (!pretrain_train_) {
    pretrain_train_ = stage("data", [&] { return data::load_dataset(config_.pretrain_dataset, Split::TRAIN, load_options()); });
  }
  return *pretrain_train_;
}

const data::LabeledDataset& Pipeline::downstream(Split split) {
  auto& slot = split == Split::TRAIN ? down_train_ : down_test_;
  if (!slot) slot = stage("data", [&] { return data::load_dataset(config_.downstream_dataset, split, load_options()); });
  return *slot;
}

pretrain::Encoder Pipeline::load_encoder(const ArtifactRef& ref) const {
  return pretrain::Encoder::load(fs::path(ref.path) / kEncoderFile);
}

data::LabeledDataset Pipeline::load_subset(const ArtifactRef& ref) {
  const auto idx = read_json_file(fs::path(ref.path) / "indices.json").at("indices").get<std::vector<std::size_t>>();
  return pretrain_train().subset(idx);
}

ArtifactRef Pipeline::clean_encoder() {
  const std::uint64_t seed = config_.attack_seed();
  const json inputs = {{"stage", "pretrain"},
                       {"dataset", pretrain_dataset_id().second},
                       {"architecture", config_.architecture},
                       {"pretrain", pretrain_json(config_.pretrain)},
                       {"seed", seed}};
  return stage("pretrain", [&] {
    return store_.get_or_create(ArtifactKind::ENCODER, "pretrain", inputs, {dataset_ref(pretrain_dataset_id())}, 0,
                                [&](const fs::path& dir) {
                                  save_encoder(dir, pretrain::contrastive_pretrain(pretrain_train(), config_.architecture,
                                                                                   config_.pretrain,
                                                                                   derive_seed(seed, "pretrain")));
                                });
  });
}

ArtifactRef Pipeline::poisoned_encoder() {
  const std::uint64_t seed = config_.attack_seed();
  const AttackSpec spec = config_.attack_spec();
  const json attack_cfg = to_json(config_).at("attack");
  if (spec.method == AttackMethod::BADENCODER) {
    const ArtifactRef clean = clean_encoder();
    const json inputs = {{"stage", "attack"},
                         {"clean", clean.hash()},
                         {"attack", attack_cfg},
                         {"downstream", downstream_dataset_id().second},
                         {"seed", seed}};
    return stage("attack", [&] {
      return store_.get_or_create(
          ArtifactKind::ENCODER, "attack", inputs, {clean, dataset_ref(downstream_dataset_id())}, 0,
          [&](const fs::path& dir) {
            const auto& a = config_.attack;
            const data::LabeledDataset shadow =
                data::sample_clean_subset(pretrain_train(), a.badencoder.shadow_fraction, derive_seed(seed, "attack/shadow"));
            attack::BadEncoderHParams h;
            h.reference_inputs = attack::pick_reference_inputs(downstream(Split::TRAIN), a.target_class,
                                                               a.badencoder.reference_count,
                                                               derive_seed(seed, "attack/references"));
            h.lambda_effect = a.badencoder.lambda_effect;
            h.lambda_utility = a.badencoder.lambda_utility;
            h.epochs = a.epochs;
            h.learning_rate = a.learning_rate;
            h.batch_size = a.batch_size;
            const pretrain::Encoder p =
                attack::badencoder_poison(load_encoder(clean), spec, shadow, h, derive_seed(seed, "attack"));
            save_encoder(dir, p);
            write_json(dir / "attack_manifest.json", p.metadata.at("attack"));
          });
    });
  }
  const json inputs = {{"stage", "attack"},
                       {"dataset", pretrain_dataset_id().second},
                       {"downstream", downstream_dataset_id().second},
                       {"architecture", config_.architecture},
                       {"pretrain", pretrain_json(config_.pretrain)},
                       {"attack", attack_cfg},
                       {"seed", seed}};
  return stage("attack", [&] {
    return store_.get_or_create(
        ArtifactKind::ENCODER, "attack", inputs,
        {dataset_ref(pretrain_dataset_id()), dataset_ref(downstream_dataset_id())}, 0, [&](const fs::path& dir) {
          const data::LabeledDataset& down = downstream(Split::TRAIN);
          std::vector<nn::Tensor> targets;
          for (auto i : down.indices_of_class(spec.target_class)) targets.push_back(down.image(i));
          const pretrain::Encoder p = attack::bassl_poison(pretrain_train(), spec, targets, config_.architecture,
                                                           config_.pretrain, derive_seed(seed, "attack"));
          save_encoder(dir, p);
          write_json(dir / "attack_manifest.json", p.metadata.at("attack"));
        });
  });
}

ArtifactRef Pipeline::clean_subset() {
  const json inputs = {{"stage", "subset"},
                       {"dataset", pretrain_dataset_id().second},
                       {"clean_data_ratio", config_.clean_data_ratio},
                       {"seed", config_.seed}};
  return stage("subset", [&] {
    return store_.get_or_create(ArtifactKind::DATASET_SUBSET, "subset", inputs, {dataset_ref(pretrain_dataset_id())}, 0,
                                [&](const fs::path& dir) {
                                  const auto idx = data::sample_subset_indices(
                                      pretrain_train().size(), config_.clean_data_ratio, derive_seed(config_.seed, "subset"));
                                  write_json(dir / "indices.json", {{"indices", idx}});
                                });
  });
}

ArtifactRef Pipeline::teacher(std::size_t n) {
  if (n >= config_.iterations) throw ValidationError("iteration", "beyond configured iterations");
  const ArtifactRef parent = n == 0 ? poisoned_encoder() : distilled(n - 1);
  const ArtifactRef subset = clean_subset();
  const TeacherMethod method = n == 0 ? config_.teacher_method : TeacherMethod::FT;
  const std::uint64_t seed = distill::iteration_seed(config_.seed, "teacher", n);
  const json inputs = {{"stage", "teacher"},
                       {"parent", parent.hash()},
                       {"subset", subset.hash()},
                       {"method", std::string(to_string(method))},
                       {"teacher", to_json(config_).at("teacher")},
                       {"finetune", pretrain_json(teacher::finetune_hparams(config_))},
                       {"seed", seed},
                       {"iteration", n}};
  return stage("teacher", [&] {
    return store_.get_or_create(ArtifactKind::ENCODER, "teacher", inputs, {parent, subset}, n, [&](const fs::path& dir) {
      pretrain::Encoder t = teacher::make_teacher(method, load_encoder(parent), load_subset(subset), config_, seed);
      t.metadata["parent_artifact"] = parent.hash();
      save_encoder(dir, t);
    });
  });
}

ArtifactRef Pipeline::student(std::size_t n) {
  if (n >= config_.iterations) throw ValidationError("iteration", "beyond configured iterations");
  if (n > 0) return distilled(n - 1);
  const StudentStrategy strategy = config_.student_strategy;
  const std::uint64_t seed = distill::iteration_seed(config_.seed, "student", 0);
  const ArtifactRef poisoned = poisoned_encoder();
  json inputs = {{"stage", "student"}, {"strategy", std::string(to_string(strategy))}};
  std::vector<ArtifactRef> parents;
  std::optional<ArtifactRef> subset;
  switch (strategy) {
    case StudentStrategy::RAW:
      inputs["parent"] = poisoned.hash();
      parents.push_back(poisoned);
      break;
    case StudentStrategy::VOID:
      inputs["architecture"] = config_.architecture;
      inputs["seed"] = seed;
      parents.push_back(dataset_ref(pretrain_dataset_id()));
      break;
    case StudentStrategy::WARMUP:
      subset = clean_subset();
      inputs["architecture"] = config_.architecture;
      inputs["subset"] = subset->hash();
      inputs["warmup"] = pretrain_json(config_.warmup);
      inputs["seed"] = seed;
      parents.push_back(*subset);
      break;
  }
  return stage("student", [&] {
    return store_.get_or_create(ArtifactKind::ENCODER, "student", inputs, parents, 0, [&](const fs::path& dir) {
      const data::LabeledDataset data = subset ? load_subset(*subset) : data::LabeledDataset{};
      save_encoder(dir, distill::init_student(strategy, load_encoder(poisoned), data, config_.warmup, seed));
    });
  });
}

ArtifactRef Pipeline::distilled(std::size_t n) {
  if (n >= config_.iterations) throw ValidationError("iteration", "beyond configured iterations");
  const ArtifactRef tea = teacher(n);
  const ArtifactRef stu = student(n);
  const ArtifactRef subset = clean_subset();
  const std::uint64_t seed = distill::iteration_seed(config_.seed, "distill", n);
  const json cj = to_json(config_);
  const json inputs = {{"stage", "distill"},
                       {"teacher", tea.hash()},
                       {"student", stu.hash()},
                       {"subset", subset.hash()},
                       {"loss_kind", std::string(to_string(config_.loss_kind))},
                       {"epochs", config_.distill_epochs},
                       {"optimizer", cj.at("optimizer")},
                       {"distill", cj.at("distill")},
                       {"seed", seed},
                       {"iteration", n}};
  return stage("distill", [&] {
    return store_.get_or_create(ArtifactKind::ENCODER, "distill", inputs, {tea, stu, subset}, n, [&](const fs::path& dir) {
      pretrain::Encoder d = distill::distill(load_encoder(tea), load_encoder(stu), load_subset(subset), config_.loss_kind,
                                             config_.distill_epochs, config_.optimizer, config_.distill, seed);
      d.metadata["iteration"] = n;
      save_encoder(dir, d);
    });
  });
}

ArtifactRef Pipeline::final_encoder() { return distilled(config_.iterations - 1); }

evaluate::MetricsRecord Pipeline::evaluate(const ArtifactRef& encoder) {
  const AttackSpec spec = config_.attack_spec();
  const std::uint64_t seed = derive_seed(config_.seed, "probe");
  const json inputs = {{"stage", "metrics"},
                       {"encoder", encoder.hash()},
                       {"downstream", downstream_dataset_id().second},
                       {"probe", to_json(config_).at("downstream")},
                       {"trigger", attack::attack_manifest(spec).at("trigger")},
                       {"target_class", spec.target_class},
                       {"seed", seed}};
  const ArtifactRef ref = stage("evaluate", [&] {
    return store_.get_or_create(
        ArtifactKind::METRICS, "metrics", inputs, {encoder, dataset_ref(downstream_dataset_id())}, encoder.iteration_index,
        [&](const fs::path& dir) {
          const auto enc = std::make_shared<const pretrain::Encoder>(load_encoder(encoder));
          const evaluate::Classifier clf =
              evaluate::train_downstream(enc, downstream(Split::TRAIN), config_.downstream, seed);
          const double acc = evaluate::compute_acc(clf, downstream(Split::TEST));
          const double asr = evaluate::compute_asr(clf, downstream(Split::TEST), spec);
          write_json(dir / "metrics.json", {{"acc", acc}, {"asr", asr}});
        });
  });
  const json m = read_json_file(fs::path(ref.path) / "metrics.json");
  return evaluate::make_metrics(m.at("acc").get<double>(), m.at("asr").get<double>(), config_.alpha, ref.lineage,
                                config_.downstream_dataset, config_.seed);
}

evaluate::MetricsRecord Pipeline::run() { return evaluate(final_encoder()); }

evaluate::MetricsRecord run_experiment(const ExperimentConfig& config, ArtifactStore& store) {
  Pipeline p(config, store);
  return p.run();
}

evaluate::MetricsRecord run_experiment(const ExperimentConfig& config) {
  ArtifactStore store(artifact_root());
  return run_experiment(config, store);
}

}  // namespace bdkit::bench
