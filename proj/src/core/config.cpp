// SPDX-License-Identifier: Apache-2.0
#include "bdkit/core/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "bdkit/core/error.hpp"
#include "bdkit/core/registry.hpp"
#include "bdkit/core/seed.hpp"

namespace bdkit {

using nlohmann::json;

// Enum <-> JSON goes through the strict parsers so typos never map silently.
void to_json(json& j, TeacherMethod v) { j = std::string(to_string(v)); }
void from_json(const json& j, TeacherMethod& v) { v = parse_teacher_method(j.get<std::string>()); }
void to_json(json& j, StudentStrategy v) { j = std::string(to_string(v)); }
void from_json(const json& j, StudentStrategy& v) { v = parse_student_strategy(j.get<std::string>()); }
void to_json(json& j, LossKind v) { j = std::string(to_string(v)); }
void from_json(const json& j, LossKind& v) { v = parse_loss_kind(j.get<std::string>()); }
void to_json(json& j, AttackMethod v) { j = std::string(to_string(v)); }
void from_json(const json& j, AttackMethod& v) { v = parse_attack_method(j.get<std::string>()); }
void to_json(json& j, PruneDirection v) { j = std::string(to_string(v)); }
void from_json(const json& j, PruneDirection& v) { v = parse_prune_direction(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(OptimizerHParams, learning_rate, batch_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PretrainHParams, epochs, learning_rate, batch_size, temperature, augmentation)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataOptions, root, synth_train_size, synth_test_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TriggerConfig, size, color, anchor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BadEncoderStrength, lambda_effect, lambda_utility, shadow_fraction, reference_count)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BasslStrength, poison_ratio, migration_fraction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AttackConfig, method, target_class, trigger, badencoder, bassl, epochs,
                                   learning_rate, batch_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TeacherHParams, finetune_epochs, finetune_learning_rate, prune_fraction,
                                   prune_direction, anp_budget, anp_batches, inversion_steps, inversion_learning_rate,
                                   mask_l1_weight, unlearn_epochs)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DistillHParams, attention_p, kd_temperature, kd_include_taps, augmentation)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DownstreamHParams, epochs, learning_rate, batch_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ExperimentConfig, pretrain_dataset, downstream_dataset, architecture, attack,
                                   teacher_method, student_strategy, loss_kind, distill_epochs, clean_data_ratio,
                                   iterations, alpha, seed, upstream_seed, optimizer, data, pretrain, warmup, teacher, distill,
                                   downstream)

AttackSpec ExperimentConfig::attack_spec() const {
  AttackSpec spec;
  spec.trigger = Trigger::solid(attack.trigger.size[0], attack.trigger.size[1], attack.trigger.color,
                                attack.trigger.anchor);
  spec.target_class = attack.target_class;
  spec.method = attack.method;
  spec.badencoder = attack.badencoder;
  spec.bassl = attack.bassl;
  return spec;
}

namespace {

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ValidationError(field, what);
}

void check_fraction_open_closed(double v, const std::string& field) {
  check(v > 0.0 && v <= 1.0, field, "must lie in (0,1], got " + std::to_string(v));
}

void check_augmentation(const std::string& name, const std::string& field) {
  check(name == "simclr" || name == "simclr-tiny" || name == "none", field, "must be 'simclr', 'simclr-tiny' or 'none'");
}

void check_pretrain(const PretrainHParams& h, const std::string& prefix) {
  check(h.learning_rate > 0.0, prefix + ".learning_rate", "must be positive");
  check(h.batch_size >= 2, prefix + ".batch_size", "contrastive batches need at least 2 examples");
  check(h.temperature > 0.0, prefix + ".temperature", "must be positive");
  check_augmentation(h.augmentation, prefix + ".augmentation");
}

}  // namespace

void validate(const ExperimentConfig& c) {
  const DatasetInfo* pre = nullptr;
  const DatasetInfo* down = nullptr;
  try {
    pre = &dataset_info(c.pretrain_dataset);
  } catch (const ValidationError& e) {
    throw ValidationError("pretrain_dataset", e.what());
  }
  try {
    down = &dataset_info(c.downstream_dataset);
  } catch (const ValidationError& e) {
    throw ValidationError("downstream_dataset", e.what());
  }
  const ArchSpec arch = parse_architecture(c.architecture);
  (void)arch;

  check_fraction_open_closed(c.clean_data_ratio, "clean_data_ratio");
  check(c.alpha >= 0.0 && c.alpha <= 1.0, "alpha", "must lie in [0,1], got " + std::to_string(c.alpha));
  check(c.iterations >= 1, "iterations", "must be at least 1");
  check(c.iterations == 1 || c.teacher_method == TeacherMethod::FT, "iterations",
        "iterative distillation (iterations > 1) requires teacher_method FT");
  check(c.upstream_seed >= -1, "upstream_seed", "must be -1 (use seed) or non-negative");
  check(c.optimizer.learning_rate > 0.0, "optimizer.learning_rate", "must be positive");
  check(c.optimizer.batch_size >= 2, "optimizer.batch_size", "must be at least 2");
  check_pretrain(c.pretrain, "pretrain");
  check_pretrain(c.warmup, "warmup");

  const auto& a = c.attack;
  check(a.target_class >= 0 && a.target_class < down->num_classes, "attack.target_class",
        "must be a label of " + down->name + " (0.." + std::to_string(down->num_classes - 1) + ")");
  check(a.trigger.size[0] >= 1 && a.trigger.size[1] >= 1, "attack.trigger.size", "must be at least 1x1");
  check(a.trigger.size[0] <= pre->load_height && a.trigger.size[1] <= pre->load_width, "attack.trigger.size",
        "larger than the image");
  check(a.trigger.color.size() == pre->channels, "attack.trigger.color",
        "needs one value per image channel (" + std::to_string(pre->channels) + ")");
  for (double v : a.trigger.color) check(v >= 0.0 && v <= 1.0, "attack.trigger.color", "values must lie in [0,1]");
  (void)Trigger::solid(a.trigger.size[0], a.trigger.size[1], a.trigger.color, a.trigger.anchor)
      .origin(pre->load_height, pre->load_width);
  check(a.badencoder.lambda_effect >= 0.0, "attack.badencoder.lambda_effect", "must be non-negative");
  check(a.badencoder.lambda_utility >= 0.0, "attack.badencoder.lambda_utility", "must be non-negative");
  check_fraction_open_closed(a.badencoder.shadow_fraction, "attack.badencoder.shadow_fraction");
  check(a.badencoder.reference_count >= 1, "attack.badencoder.reference_count", "must be at least 1");
  check_fraction_open_closed(a.bassl.poison_ratio, "attack.bassl.poison_ratio");
  check(a.bassl.migration_fraction >= 0.0 && a.bassl.migration_fraction <= 1.0, "attack.bassl.migration_fraction",
        "must lie in [0,1]");
  check(a.learning_rate > 0.0, "attack.learning_rate", "must be positive");
  check(a.batch_size >= 1, "attack.batch_size", "must be positive");

  const auto& t = c.teacher;
  check(t.finetune_learning_rate > 0.0, "teacher.finetune_learning_rate", "must be positive");
  check(t.prune_fraction >= 0.0 && t.prune_fraction < 1.0, "teacher.prune_fraction", "must lie in [0,1)");
  check(t.anp_budget > 0.0, "teacher.anp_budget", "must be positive");
  check(t.anp_batches >= 1, "teacher.anp_batches", "must be positive");
  check(t.inversion_learning_rate > 0.0, "teacher.inversion_learning_rate", "must be positive");
  check(t.mask_l1_weight >= 0.0, "teacher.mask_l1_weight", "must be non-negative");

  check(c.distill.attention_p >= 1.0, "distill.attention_p", "must be at least 1");
  check(c.distill.kd_temperature > 0.0, "distill.kd_temperature", "must be positive");
  check_augmentation(c.distill.augmentation, "distill.augmentation");
  check(c.downstream.learning_rate > 0.0, "downstream.learning_rate", "must be positive");
  check(c.downstream.batch_size >= 1, "downstream.batch_size", "must be positive");
  if (c.pretrain_dataset == kSynthTiny || c.downstream_dataset == kSynthTiny) {
    check(c.data.synth_train_size >= 3, "data.synth_train_size", "must be at least 3");
    check(c.data.synth_test_size >= 3, "data.synth_test_size", "must be at least 3");
  }
}

nlohmann::json to_json(const ExperimentConfig& config) {
  json j = config;
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  from_json(j, c);
  return c;
}

namespace {

std::size_t line_of(const YAML::Node& n) { return static_cast<std::size_t>(n.Mark().line + 1); }

json convert_scalar(const YAML::Node& node, const json& schema, const std::string& path) {
  try {
    if (schema.is_boolean()) return node.as<bool>();
    if (schema.is_number_unsigned()) {
      const auto text = node.as<std::string>();
      if (!text.empty() && text[0] == '-') throw ValidationError(path, "must be non-negative, got " + text);
      return node.as<std::uint64_t>();
    }
    if (schema.is_number_integer()) return node.as<long long>();
    if (schema.is_number_float()) return node.as<double>();
    if (schema.is_string()) return node.as<std::string>();
  } catch (const YAML::BadConversion&) {
    throw ConfigError("value of '" + path + "' has the wrong type (expected " + schema.type_name() + ")",
                      line_of(node));
  }
  throw ConfigError("unsupported schema type at '" + path + "'", line_of(node));
}

void merge(const YAML::Node& node, json& target, const json& schema, const std::string& path,
           std::map<std::string, std::size_t>& lines) {
  if (!path.empty()) lines[path] = line_of(node);
  if (schema.is_object()) {
    if (node.IsNull()) return;
    if (!node.IsMap()) throw ConfigError("expected a mapping for '" + (path.empty() ? "<root>" : path) + "'", line_of(node));
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      const std::string child = path.empty() ? key : path + "." + key;
      if (!schema.contains(key)) throw ConfigError("unknown key '" + child + "'", line_of(kv.first));
      merge(kv.second, target[key], schema[key], child, lines);
    }
    return;
  }
  if (schema.is_array()) {
    if (!node.IsSequence()) throw ConfigError("expected a sequence for '" + path + "'", line_of(node));
    const bool fixed = path.size() < 6 || path.substr(path.size() - 6) != ".color";
    if (fixed && node.size() != schema.size()) {
      throw ConfigError("'" + path + "' needs " + std::to_string(schema.size()) + " entries", line_of(node));
    }
    json arr = json::array();
    for (const auto& item : node) arr.push_back(convert_scalar(item, schema.front(), path));
    target = std::move(arr);
    return;
  }
  if (!node.IsScalar()) throw ConfigError("expected a scalar for '" + path + "'", line_of(node));
  target = convert_scalar(node, schema, path);
}

ExperimentConfig finish(const json& merged, const std::map<std::string, std::size_t>& lines) {
  ExperimentConfig c;
  try {
    c = config_from_json(merged);
    validate(c);
  } catch (const ValidationError& e) {
    auto it = lines.find(e.field());
    if (it == lines.end()) throw;
    throw ValidationError(e.field(), std::string(e.what()) + " (line " + std::to_string(it->second) + ")");
  }
  return c;
}

ExperimentConfig merge_yaml(const YAML::Node& root, const ExperimentConfig& base) {
  const json schema = to_json(ExperimentConfig{});
  json merged = to_json(base);
  std::map<std::string, std::size_t> lines;
  merge(root, merged, schema, "", lines);
  return finish(merged, lines);
}

void emit(YAML::Emitter& out, const json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : j) emit(out, v);
    out << YAML::EndSeq;
  } else if (j.is_number_float()) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, j.get<double>());
    std::string s(buf, res.ptr);
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    out << s;
  } else if (j.is_number_unsigned()) {
    out << j.get<std::uint64_t>();
  } else if (j.is_number_integer()) {
    out << j.get<long long>();
  } else if (j.is_boolean()) {
    out << j.get<bool>();
  } else {
    out << YAML::DoubleQuoted << j.get<std::string>();
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(e.msg, static_cast<std::size_t>(e.mark.line + 1));
  }
  return merge_yaml(root, ExperimentConfig{});
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  YAML::Emitter out;
  emit(out, to_json(config));
  return std::string(out.c_str()) + "\n";
}

ExperimentConfig apply_overrides(const ExperimentConfig& config, const std::vector<std::string>& overrides) {
  YAML::Node root(YAML::NodeType::Map);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not key=value", 0);
    const std::string key = ov.substr(0, eq);
    YAML::Node value;
    try {
      value = YAML::Load(ov.substr(eq + 1));
    } catch (const YAML::ParserException& e) {
      throw ConfigError("override '" + ov + "': " + e.msg, 0);
    }
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    // yaml-cpp node handles are references, so walk with reset() rather than assignment.
    YAML::Node cursor;
    cursor.reset(root);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!cursor[parts[i]]) cursor[parts[i]] = YAML::Node(YAML::NodeType::Map);
      YAML::Node next = cursor[parts[i]];
      cursor.reset(next);
    }
    cursor[parts.back()] = value;
  }
  return merge_yaml(root, config);
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(to_json(config).dump()); }

std::filesystem::path data_root(const ExperimentConfig& config) {
  if (!config.data.root.empty()) return config.data.root;
  if (const char* env = std::getenv("BDKIT_DATA_ROOT"); env && *env) return env;
  return "data";
}

std::filesystem::path artifact_root() {
  if (const char* env = std::getenv("BDKIT_ARTIFACT_ROOT"); env && *env) return env;
  return "artifacts";
}

}  // namespace bdkit
