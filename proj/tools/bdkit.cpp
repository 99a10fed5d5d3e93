// SPDX-License-Identifier: Apache-2.0
//
// bdkit: command-line front end. Every pipeline subcommand takes a YAML config
// plus --set key=value overrides and prints one JSON object per result on stdout.
// Exit status: 0 when every requested cell completed, 1 otherwise, 2 on usage errors.
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bdkit/bench/pipeline.hpp"
#include "bdkit/bench/sweep.hpp"
#include "bdkit/core/config.hpp"
#include "bdkit/core/error.hpp"

namespace {

using namespace bdkit;
using nlohmann::json;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string artifacts;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config_path, "experiment config (YAML); omit for defaults");
  cmd->add_option("-s,--set", c.overrides, "override, e.g. --set distill_epochs=200 (repeatable)");
  cmd->add_option("--artifacts", c.artifacts, "artifact root (default $BDKIT_ARTIFACT_ROOT or ./artifacts)");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress lines on stderr");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  cfg = apply_overrides(cfg, c.overrides);
  validate(cfg);
  return cfg;
}

std::unique_ptr<bench::ArtifactStore> open_store(const Common& c) {
  auto store = std::make_unique<bench::ArtifactStore>(c.artifacts.empty() ? artifact_root()
                                                                          : std::filesystem::path(c.artifacts));
  if (!c.quiet) store->set_logger([](const std::string& line) { std::cerr << "[bdkit] " << line << std::endl; });
  return store;
}

json ref_json(const ArtifactRef& r) {
  json lineage = json::array();
  for (const auto& [s, h] : r.lineage) lineage.push_back({{"stage", s}, {"hash", h}});
  return {{"kind", std::string(to_string(r.kind))},
          {"path", r.path},
          {"iteration", r.iteration_index},
          {"lineage", lineage}};
}

void print_stats(const bench::ArtifactStore& store, bool quiet) {
  if (quiet) return;
  const auto s = store.stats();
  std::cerr << "[bdkit] cache: " << s.total_hits() << " hit(s), " << s.total_misses() << " computed" << std::endl;
}

std::string row_label(const ExperimentConfig& c) {
  return std::string(to_string(c.teacher_method)) + "/" + std::string(to_string(c.student_strategy)) + "/" +
         std::string(to_string(c.loss_kind));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor injection, distillation-based mitigation and evaluation for SSL encoders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", BDKIT_VERSION);

  Common common;
  std::size_t iteration = 0;
  std::string eval_stage = "final";
  std::string results_path;
  std::string axis;
  std::vector<std::string> values;
  std::size_t workers = 1;
  std::string table_path, out_dir = "reports";
  std::vector<std::string> formats{"CSV", "JSONL", "PLOTS"};

  auto* pretrain = app.add_subcommand("pretrain", "contrastive pre-training of the clean encoder");
  auto* attack = app.add_subcommand("attack", "produce the poisoned encoder");
  auto* teacher = app.add_subcommand("teacher", "produce the teacher net");
  auto* distill = app.add_subcommand("distill", "initialize the student and distill it from the teacher");
  auto* eval = app.add_subcommand("eval", "downstream probe + ACC/ASR/BS for one pipeline stage");
  auto* run = app.add_subcommand("run", "full pipeline for one config");
  auto* sweep = app.add_subcommand("sweep", "run one cell per value along an axis");
  auto* report = app.add_subcommand("report", "render CSV/JSONL/SVG reports from a result table");
  for (auto* cmd : {pretrain, attack, teacher, distill, eval, run, sweep}) add_common(cmd, common);
  for (auto* cmd : {teacher, distill}) cmd->add_option("--iteration", iteration, "iteration index (default 0)");
  eval->add_option("--stage", eval_stage, "clean, poisoned, teacher, student, distilled or final")
      ->check(CLI::IsMember({"clean", "poisoned", "teacher", "student", "distilled", "final"}));
  eval->add_option("--iteration", iteration, "iteration index for teacher/student/distilled");
  run->add_option("--results", results_path, "append the row to this table (.jsonl or .csv)");
  sweep->add_option("--axis", axis, "EPOCHS, DATA_RATIO, TRIGGER_SIZE, ARCHITECTURE or ITERATIONS")->required();
  sweep->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  sweep->add_option("--workers", workers, "concurrent cells (default 1)");
  sweep->add_option("--out", results_path, "result table path (default results/sweep-<axis>.jsonl)");
  report->add_option("table", table_path, "result table (.jsonl or .csv)")->required();
  report->add_option("--formats", formats, "subset of CSV,JSONL,PLOTS")->delimiter(',');
  report->add_option("--out", out_dir, "output directory (default ./reports)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::set<bench::ReportFormat> fs;
      for (const auto& f : formats) fs.insert(bench::parse_report_format(f));
      for (const auto& p : bench::emit_report(bench::read_table(table_path), fs, out_dir)) std::cout << p.string() << "\n";
      return 0;
    }

    const ExperimentConfig cfg = load(common);
    auto store = open_store(common);

    if (sweep->parsed()) {
      bench::SweepSpec spec;
      spec.axis = bench::parse_sweep_axis(axis);
      spec.values = values;
      spec.base = cfg;
      spec.workers = workers;
      const bench::ResultTable table = bench::run_sweep(spec, *store);
      const std::string out = results_path.empty() ? "results/sweep-" + std::string(to_string(spec.axis)) + ".jsonl"
                                                   : results_path;
      bench::write_table(table, out);
      for (const auto& r : table.rows) {
        std::cout << json{{"sweep_value", r.sweep_value}, {"status", r.status}, {"metrics", evaluate::to_json(r.metrics)}}
                         .dump()
                  << "\n";
      }
      std::cerr << "[bdkit] table written to " << out << std::endl;
      print_stats(*store, common.quiet);
      return table.all_ok() ? 0 : 1;
    }

    bench::Pipeline p(cfg, *store);
    if (pretrain->parsed()) {
      std::cout << ref_json(p.clean_encoder()).dump() << "\n";
    } else if (attack->parsed()) {
      std::cout << ref_json(p.poisoned_encoder()).dump() << "\n";
    } else if (teacher->parsed()) {
      std::cout << ref_json(p.teacher(iteration)).dump() << "\n";
    } else if (distill->parsed()) {
      std::cout << ref_json(p.distilled(iteration)).dump() << "\n";
    } else if (eval->parsed()) {
      const ArtifactRef target = eval_stage == "clean"      ? p.clean_encoder()
                                 : eval_stage == "poisoned" ? p.poisoned_encoder()
                                 : eval_stage == "teacher"  ? p.teacher(iteration)
                                 : eval_stage == "student"  ? p.student(iteration)
                                 : eval_stage == "distilled" ? p.distilled(iteration)
                                                             : p.final_encoder();
      std::cout << evaluate::to_json(p.evaluate(target)).dump() << "\n";
    } else if (run->parsed()) {
      const evaluate::MetricsRecord m = p.run();
      std::cout << evaluate::to_json(m).dump() << "\n";
      if (!results_path.empty()) {
        bench::ResultTable table = std::filesystem::exists(results_path) ? bench::read_table(results_path)
                                                                         : bench::make_table("config");
        table.rows.push_back({p.config_hash(), row_label(cfg), "ok", m});
        bench::write_table(table, results_path);
      }
    }
    print_stats(*store, common.quiet);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "bdkit: config error: " << e.what() << std::endl;
  } catch (const ValidationError& e) {
    std::cerr << "bdkit: invalid value: " << e.what() << std::endl;
  } catch (const std::exception& e) {
    std::cerr << "bdkit: " << e.what() << std::endl;
  }
  return 1;
}
