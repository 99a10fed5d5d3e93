// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "bdkit/bench/store.hpp"
#include "bdkit/core/config.hpp"
#include "bdkit/evaluate/metrics.hpp"

namespace bdkit::bench {

enum class SweepAxis { EPOCHS, DATA_RATIO, TRIGGER_SIZE, ARCHITECTURE, ITERATIONS };
std::string_view to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view s);

/// Values are kept as text and parsed per axis: EPOCHS -> distill_epochs (> 0),
/// DATA_RATIO -> clean_data_ratio, TRIGGER_SIZE -> square trigger side,
/// ARCHITECTURE -> architecture id, ITERATIONS -> iterations.
struct SweepSpec {
  SweepAxis axis = SweepAxis::EPOCHS;
  std::vector<std::string> values;
  ExperimentConfig base;
  /// Cells run concurrently when > 1.
  std::size_t workers = 1;

  /// Non-empty values, each valid for the axis and yielding a valid config.
  void validate() const;
  ExperimentConfig cell(std::size_t i) const;
};

struct ResultRow {
  std::string config_hash;
  std::string sweep_value;
  /// "ok" or the failure message.
  std::string status = "ok";
  evaluate::MetricsRecord metrics;

  bool ok() const { return status == "ok"; }
  bool operator==(const ResultRow&) const = default;
};

struct ResultTable {
  std::string axis;  // sweep axis name, or a free label such as "teacher"
  std::vector<ResultRow> rows;
  std::string created;  // ISO-8601 UTC
  std::string toolkit_version;

  bool all_ok() const;
  /// SHA-256 of the JSONL form; names report files.
  std::string hash() const;
  bool operator==(const ResultTable&) const = default;
};

/// Exact round trips: doubles are written with 17 significant digits.
std::string to_csv(const ResultTable& table);
ResultTable table_from_csv(const std::string& text);
std::string to_jsonl(const ResultTable& table);
ResultTable table_from_jsonl(const std::string& text);

void write_table(const ResultTable& table, const std::filesystem::path& path);  // by extension .csv / .jsonl
ResultTable read_table(const std::filesystem::path& path);

ResultTable make_table(std::string axis);

/// One run_experiment per value, rows in value order. Failed cells get a status
/// message instead of aborting the sweep.
ResultTable run_sweep(const SweepSpec& spec, ArtifactStore& store);

enum class ReportFormat { CSV, JSONL, PLOTS };
ReportFormat parse_report_format(std::string_view s);

/// Writes report-<hash12>.{csv,jsonl}, report-<hash12>-table.csv (percentages with
/// two decimals, one row per label) and, for PLOTS, SVG figures with a
/// report-<hash12>-plots.json description of their elements.
/// Empty format set or table -> ValidationError; unwritable directory -> IoError.
std::vector<std::filesystem::path> emit_report(const ResultTable& table, const std::set<ReportFormat>& formats,
                                               const std::filesystem::path& out_dir);

}  // namespace bdkit::bench
