// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bdkit/bench/pipeline.hpp"
#include "bdkit/bench/store.hpp"
#include "bdkit/bench/sweep.hpp"
#include "bdkit/core/config.hpp"
#include "bdkit/core/error.hpp"
#include "helpers.hpp"

namespace bdkit::bench {
namespace {

using bdkit::testing::ScratchDir;
using nlohmann::json;
namespace fs = std::filesystem;

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---- store --------------------------------------------------------------------

TEST(Store, MissThenHit) {
  ScratchDir dir("store");
  ArtifactStore store(dir.path());
  int produced = 0;
  auto produce = [&](const fs::path& d) {
    ++produced;
    write_text(d / "payload.txt", "hello");
  };
  const json inputs = {{"a", 1}, {"b", "x"}};
  const ArtifactRef r1 = store.get_or_create(ArtifactKind::ENCODER, "pretrain", inputs, {}, 0, produce);
  const ArtifactRef r2 = store.get_or_create(ArtifactKind::ENCODER, "pretrain", inputs, {}, 0, produce);
  EXPECT_EQ(produced, 1);
  EXPECT_EQ(r1.path, r2.path);
  EXPECT_EQ(read_text(fs::path(r1.path) / "payload.txt"), "hello");
  EXPECT_EQ(r1.lineage.front(), std::make_pair(std::string("pretrain"), ArtifactStore::key_of(inputs)));
  EXPECT_EQ(store.stats().total_hits(), 1u);
  EXPECT_EQ(store.stats().total_misses(), 1u);

  const ArtifactRef child = store.get_or_create(ArtifactKind::ENCODER, "attack", {{"parent", r1.lineage[0].second}},
                                                {r1}, 0, produce);
  ASSERT_EQ(child.lineage.size(), 2u);
  EXPECT_EQ(child.lineage[1], r1.lineage[0]);
  EXPECT_EQ(child.producer(), "attack");
}

TEST(Store, KeyIgnoresFieldOrder) {
  EXPECT_EQ(ArtifactStore::key_of(json::parse(R"({"a":1,"b":[1,2]})")),
            ArtifactStore::key_of(json::parse(R"({"b":[1,2],"a":1})")));
  EXPECT_NE(ArtifactStore::key_of(json::parse(R"({"a":1})")), ArtifactStore::key_of(json::parse(R"({"a":2})")));
}

TEST(Store, TamperedPayloadIsStale) {
  ScratchDir dir("stale");
  ArtifactStore store(dir.path());
  auto produce = [](const fs::path& d) { write_text(d / "w.bin", "weights"); };
  const ArtifactRef r = store.get_or_create(ArtifactKind::ENCODER, "teacher", {{"k", 1}}, {}, 0, produce);
  write_text(fs::path(r.path) / "w.bin", "tampered");
  EXPECT_THROW(store.verify(r), StaleArtifactError);
  EXPECT_THROW(store.get_or_create(ArtifactKind::ENCODER, "teacher", {{"k", 1}}, {}, 0, produce), StaleArtifactError);
  fs::remove(fs::path(r.path) / "w.bin");
  EXPECT_THROW(store.verify(r), StaleArtifactError);
}

TEST(Store, ManifestWithOtherInputsIsStale) {
  ScratchDir dir("inputs");
  ArtifactStore store(dir.path());
  auto produce = [](const fs::path& d) { write_text(d / "x", "1"); };
  const ArtifactRef r = store.get_or_create(ArtifactKind::ENCODER, "distill", {{"k", 1}}, {}, 0, produce);
  json m = json::parse(read_text(fs::path(r.path) / "manifest.json"));
  m["inputs"] = {{"k", 2}};
  write_text(fs::path(r.path) / "manifest.json", m.dump());
  EXPECT_THROW(store.get_or_create(ArtifactKind::ENCODER, "distill", {{"k", 1}}, {}, 0, produce), StaleArtifactError);
}

TEST(Store, FailedProducerLeavesNothing) {
  ScratchDir dir("fail");
  ArtifactStore store(dir.path());
  EXPECT_THROW(store.get_or_create(ArtifactKind::ENCODER, "attack", {{"k", 1}}, {}, 0,
                                   [](const fs::path&) { throw TrainingError("attack", 3); }),
               TrainingError);
  const fs::path stage_dir = store.directory(ArtifactKind::ENCODER, "attack", ArtifactStore::key_of({{"k", 1}}));
  EXPECT_FALSE(fs::exists(stage_dir));
  if (fs::exists(stage_dir.parent_path())) EXPECT_TRUE(fs::is_empty(stage_dir.parent_path()));
}

// ---- tables & reports ---------------------------------------------------------------

ResultTable sample_table(std::size_t n) {
  ResultTable t = make_table("EPOCHS");
  for (std::size_t i = 0; i < n; ++i) {
    ResultRow r;
    r.config_hash = "hash" + std::to_string(i);
    r.sweep_value = std::to_string(10 * (i + 1));
    r.metrics = evaluate::make_metrics(0.1 + 0.2 * static_cast<double>(i) / 3.0, 1.0 / 3.0, 0.5,
                                       {{"distill", "k" + std::to_string(i)}, {"teacher", "t"}}, "SYNTH-TINY", i);
    t.rows.push_back(r);
  }
  return t;
}

TEST(Tables, CsvAndJsonlRoundTripExactly) {
  ResultTable t = sample_table(3);
  t.rows[1].sweep_value = "odd, \"quoted\" value";
  t.rows[2].status = "failed: stage teacher";
  EXPECT_EQ(table_from_csv(to_csv(t)), t);
  EXPECT_EQ(table_from_jsonl(to_jsonl(t)), t);
  EXPECT_FALSE(t.all_ok());
  EXPECT_TRUE(sample_table(2).all_ok());

  ScratchDir dir("tables");
  write_table(t, dir.path() / "t.csv");
  write_table(t, dir.path() / "t.jsonl");
  EXPECT_EQ(read_table(dir.path() / "t.csv"), t);
  EXPECT_EQ(read_table(dir.path() / "t.jsonl"), t);
  EXPECT_THROW(table_from_csv("not,a,header\n"), ValidationError);
}

TEST(Report, ErrorsAndPlotElements) {
  ScratchDir dir("report");
  const ResultTable t = sample_table(4);
  EXPECT_THROW(emit_report(t, {}, dir.path()), ValidationError);
  EXPECT_THROW(emit_report(make_table("EPOCHS"), {ReportFormat::CSV}, dir.path()), ValidationError);
  EXPECT_THROW(parse_report_format("PDF"), ValidationError);

  const auto files = emit_report(t, {ReportFormat::CSV, ReportFormat::JSONL, ReportFormat::PLOTS}, dir.path());
  const std::string stem = "report-" + t.hash().substr(0, 12);
  std::set<std::string> names;
  for (const auto& f : files) names.insert(f.filename().string());
  for (const char* suffix : {".csv", ".jsonl", "-table.csv", "-bars.svg", "-lines.svg", "-plots.json"})
    EXPECT_TRUE(names.count(stem + suffix)) << suffix;

  const json meta = json::parse(read_text(dir.path() / (stem + "-plots.json")));
  ASSERT_EQ(meta["figures"].size(), 2u);
  for (const auto& fig : meta["figures"]) EXPECT_EQ(fig["elements"], 12);  // 4 values x 3 metrics
  EXPECT_EQ(meta["figures"][0]["groups"].size(), 4u);

  const std::string table_csv = read_text(dir.path() / (stem + "-table.csv"));
  EXPECT_NE(table_csv.find("10,"), std::string::npos);
  EXPECT_NE(table_csv.find("33.33"), std::string::npos);  // ASR as a percentage

  // plots/CSV skip failed rows but JSONL keeps them
  ResultTable partial = t;
  partial.rows[0].status = "failed";
  emit_report(partial, {ReportFormat::PLOTS}, dir.path());
  const json meta2 = json::parse(read_text(dir.path() / ("report-" + partial.hash().substr(0, 12) + "-plots.json")));
  EXPECT_EQ(meta2["figures"][0]["elements"], 9);
}

// ---- sweeps and pipeline --------------------------------------------------------

ExperimentConfig tiny_config() {
  ExperimentConfig c = load_config(fs::path(BDKIT_SOURCE_DIR) / "configs" / "synth_tiny.yaml");
  return apply_overrides(c, {"architecture=tiny-cnn:4,8", "data.synth_train_size=60", "data.synth_test_size=30",
                             "pretrain.epochs=1", "pretrain.batch_size=16", "warmup.epochs=1",
                             "warmup.batch_size=16", "attack.epochs=1", "attack.batch_size=16",
                             "attack.badencoder.reference_count=5", "teacher.finetune_epochs=1",
                             "teacher.unlearn_epochs=1", "teacher.inversion_steps=2", "distill_epochs=1",
                             "downstream.epochs=2", "downstream.batch_size=16", "optimizer.batch_size=16",
                             "clean_data_ratio=0.5"});
}

TEST(Sweep, ValidationAndCells) {
  SweepSpec s;
  s.base = tiny_config();
  s.axis = SweepAxis::EPOCHS;
  EXPECT_THROW(s.validate(), ValidationError);  // no values
  s.values = {"10", "0"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.values = {"10", "abc"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.values = {"10", "20"};
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.cell(1).distill_epochs, 20u);

  s.axis = SweepAxis::TRIGGER_SIZE;
  s.values = {"5", "40"};  // 40 does not fit a 16x16 image
  EXPECT_THROW(s.validate(), ValidationError);
  s.values = {"5"};
  EXPECT_EQ(s.cell(0).attack.trigger.size, (std::array<std::size_t, 2>{5, 5}));

  s.axis = SweepAxis::DATA_RATIO;
  s.values = {"0.25", "1.5"};
  EXPECT_THROW(s.validate(), ValidationError);
  s.values = {"0.25"};
  EXPECT_DOUBLE_EQ(s.cell(0).clean_data_ratio, 0.25);
  EXPECT_EQ(parse_sweep_axis("trigger_size"), SweepAxis::TRIGGER_SIZE);
  EXPECT_THROW(parse_sweep_axis("LR"), ValidationError);
}

TEST(Pipeline, IdentityDefenseReproducesPoisonedMetrics) {
  ScratchDir dir("identity");
  ArtifactStore store(dir.path());
  ExperimentConfig c = apply_overrides(tiny_config(), {"teacher_method=NONE", "student_strategy=RAW",
                                                       "distill_epochs=0"});
  Pipeline p(c, store);
  const auto final_enc = p.load_encoder(p.final_encoder());
  const auto poisoned = p.load_encoder(p.poisoned_encoder());
  EXPECT_EQ(final_enc.flat_parameters(), poisoned.flat_parameters());
  const auto m_final = p.run();
  const auto m_poisoned = p.evaluate(p.poisoned_encoder());
  EXPECT_DOUBLE_EQ(m_final.acc, m_poisoned.acc);
  EXPECT_DOUBLE_EQ(m_final.asr, m_poisoned.asr);
}

TEST(Pipeline, RerunIsFullCacheHitAndDownstreamChangesShareUpstream) {
  ScratchDir dir("rerun");
  ArtifactStore store(dir.path());
  const ExperimentConfig c = tiny_config();
  const auto m1 = run_experiment(c, store);
  store.reset_stats();
  const auto m2 = run_experiment(c, store);
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(store.stats().total_misses(), 0u);

  // alpha only rescales BS; a new downstream schedule re-runs only the probe
  store.reset_stats();
  const auto m3 = run_experiment(apply_overrides(c, {"alpha=0.9"}), store);
  EXPECT_EQ(store.stats().total_misses(), 0u);
  EXPECT_DOUBLE_EQ(m3.acc, m1.acc);
  EXPECT_NE(m3.bs, m1.bs);

  store.reset_stats();
  run_experiment(apply_overrides(c, {"downstream.epochs=3"}), store);
  const auto stats = store.stats();
  for (const auto& [stage, n] : stats.misses) EXPECT_TRUE(stage == "evaluate" || stage == "metrics") << stage;
  EXPECT_GT(stats.hits.at("distill"), 0u);
}

TEST(Pipeline, SeedsSharingAnUpstreamReusePoisonedEncoder) {
  ScratchDir dir("upstream");
  ArtifactStore store(dir.path());
  ExperimentConfig a = apply_overrides(tiny_config(), {"upstream_seed=1", "seed=1"});
  ExperimentConfig b = apply_overrides(tiny_config(), {"upstream_seed=1", "seed=2"});
  Pipeline pa(a, store), pb(b, store);
  EXPECT_EQ(pa.poisoned_encoder().path, pb.poisoned_encoder().path);
  EXPECT_NE(pa.clean_subset().path, pb.clean_subset().path);
}

// ---- CLI ------------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + BDKIT_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  ScratchDir dir("cli");
  const std::string cfg = dir.path().string() + "/tiny.yaml";
  write_text(cfg, serialize_config(tiny_config()));
  const std::string art = " --artifacts \"" + dir.path().string() + "/art\" -q";
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_NE(run_cli("frobnicate"), 0);
  EXPECT_EQ(run_cli("run \"" + cfg + "\"" + art + " --set distill_epochs=0 --set teacher_method=NONE"), 0);
  EXPECT_EQ(run_cli("eval \"" + cfg + "\"" + art + " --stage poisoned"), 0);
  EXPECT_EQ(run_cli("run \"" + cfg + "\"" + art + " --set no_such_key=1"), 1);
  EXPECT_EQ(run_cli("run \"" + cfg + "\"" + art + " --set alpha=3"), 1);
  EXPECT_EQ(run_cli("report \"" + dir.path().string() + "/missing.jsonl\""), 1);
  const std::string table = dir.path().string() + "/sweep.jsonl";
  EXPECT_EQ(run_cli("sweep \"" + cfg + "\"" + art + " --axis EPOCHS --values 1,2 --out \"" + table + "\""), 0);
  EXPECT_EQ(read_table(table).rows.size(), 2u);
  EXPECT_EQ(run_cli("report \"" + table + "\" --out \"" + dir.path().string() + "/rep\""), 0);
}

}  // namespace
}  // namespace bdkit::bench
