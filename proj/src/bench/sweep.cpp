// SPDX-License-Identifier: Apache-2.0
#include "bdkit/bench/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "bdkit/bench/pipeline.hpp"
#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"

#ifndef BDKIT_VERSION
#define BDKIT_VERSION "0.0.0"
#endif

namespace bdkit::bench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed2(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::uint64_t parse_positive(const std::string& v, const char* field) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || x <= 0) throw ValidationError(field, "expected a positive integer, got '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

double parse_real(const std::string& v, const char* field) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ValidationError(field, "expected a number, got '" + v + "'");
  return x;
}

// CSV quoting for fields that may hold commas or quotes (status messages).
std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        in_quotes = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string lineage_text(const std::vector<std::pair<std::string, std::string>>& lineage) {
  std::string out;
  for (const auto& [stage, hash] : lineage) {
    if (!out.empty()) out += ';';
    out += stage + "=" + hash;
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_lineage(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("lineage", "malformed entry '" + item + "'");
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return out;
}

const char* kCsvHeader = "axis,sweep_value,config_hash,status,acc,asr,bs,alpha,downstream_dataset,seed,lineage,created,toolkit_version";

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- SVG rendering -------------------------------------------------------

struct Series {
  std::string name;
  std::string color;
  std::vector<double> values;
};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr double kW = 640, kH = 360, kLeft = 60, kRight = 20, kTop = 30, kBottom = 60;

std::string axes_svg(const std::string& title, const std::string& x_label) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << kW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << esc(title) << "</text>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = kH - kBottom - t * (kH - kBottom - kTop) / 4.0;
    s << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fixed2(t * 25.0) << "</text>\n";
  }
  s << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << esc(x_label) << "</text>\n";
  s << "<text x=\"14\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 14 " << kH / 2
    << ")\" text-anchor=\"middle\">%</text>\n";
  return s.str();
}

std::string legend_svg(const std::vector<Series>& series) {
  std::ostringstream s;
  double x = kLeft + 10;
  for (const auto& se : series) {
    s << "<rect x=\"" << x << "\" y=\"" << kTop << "\" width=\"10\" height=\"10\" fill=\"" << se.color << "\"/>";
    s << "<text x=\"" << x + 14 << "\" y=\"" << kTop + 9 << "\">" << esc(se.name) << "</text>\n";
    x += 70;
  }
  return s.str();
}

double y_of(double pct) { return kH - kBottom - std::clamp(pct, 0.0, 100.0) / 100.0 * (kH - kBottom - kTop); }

// Grouped bars: one group per label, one bar per series. Returns SVG and bar count.
std::pair<std::string, std::size_t> grouped_bars(const std::string& title, const std::string& x_label,
                                                 const std::vector<std::string>& labels,
                                                 const std::vector<Series>& series) {
  std::ostringstream s;
  s << axes_svg(title, x_label);
  const double span = (kW - kLeft - kRight) / static_cast<double>(std::max<std::size_t>(labels.size(), 1));
  const double bar = span * 0.8 / static_cast<double>(series.size());
  std::size_t bars = 0;
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const double x0 = kLeft + g * span + span * 0.1;
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = series[k].values[g];
      const double y = y_of(v);
      s << "<rect class=\"bar\" data-group=\"" << esc(labels[g]) << "\" data-metric=\"" << esc(series[k].name)
        << "\" x=\"" << x0 + k * bar << "\" y=\"" << y << "\" width=\"" << bar * 0.95 << "\" height=\""
        << kH - kBottom - y << "\" fill=\"" << series[k].color << "\"/>\n";
      ++bars;
    }
    s << "<text x=\"" << x0 + span * 0.4 << "\" y=\"" << kH - kBottom + 14 << "\" text-anchor=\"middle\">"
      << esc(labels[g]) << "</text>\n";
  }
  s << legend_svg(series) << "</svg>\n";
  return {s.str(), bars};
}

std::pair<std::string, std::size_t> lines(const std::string& title, const std::string& x_label,
                                          const std::vector<std::string>& labels, const std::vector<Series>& series) {
  std::ostringstream s;
  s << axes_svg(title, x_label);
  const std::size_t n = labels.size();
  auto x_of = [&](std::size_t i) {
    return n <= 1 ? (kLeft + kW - kRight) / 2 : kLeft + 20 + i * (kW - kLeft - kRight - 40) / static_cast<double>(n - 1);
  };
  std::size_t points = 0;
  for (const auto& se : series) {
    s << "<polyline class=\"series\" data-metric=\"" << esc(se.name) << "\" fill=\"none\" stroke=\"" << se.color
      << "\" points=\"";
    for (std::size_t i = 0; i < n; ++i) s << x_of(i) << "," << y_of(se.values[i]) << " ";
    s << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
      s << "<circle class=\"point\" cx=\"" << x_of(i) << "\" cy=\"" << y_of(se.values[i]) << "\" r=\"3\" fill=\""
        << se.color << "\"/>\n";
      ++points;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    s << "<text x=\"" << x_of(i) << "\" y=\"" << kH - kBottom + 14 << "\" text-anchor=\"middle\">" << esc(labels[i])
      << "</text>\n";
  }
  s << legend_svg(series) << "</svg>\n";
  return {s.str(), points};
}

}  // namespace

std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::EPOCHS: return "EPOCHS";
    case SweepAxis::DATA_RATIO: return "DATA_RATIO";
    case SweepAxis::TRIGGER_SIZE: return "TRIGGER_SIZE";
    case SweepAxis::ARCHITECTURE: return "ARCHITECTURE";
    case SweepAxis::ITERATIONS: return "ITERATIONS";
  }
  return "?";
}

SweepAxis parse_sweep_axis(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto a : {SweepAxis::EPOCHS, SweepAxis::DATA_RATIO, SweepAxis::TRIGGER_SIZE, SweepAxis::ARCHITECTURE,
                 SweepAxis::ITERATIONS}) {
    if (to_string(a) == s) return a;
  }
  throw ValidationError("axis", "unknown sweep axis '" + std::string(text) +
                                    "' (EPOCHS, DATA_RATIO, TRIGGER_SIZE, ARCHITECTURE, ITERATIONS)");
}

ExperimentConfig SweepSpec::cell(std::size_t i) const {
  ExperimentConfig c = base;
  const std::string& v = values.at(i);
  switch (axis) {
    case SweepAxis::EPOCHS: c.distill_epochs = parse_positive(v, "sweep.values"); break;
    case SweepAxis::DATA_RATIO: c.clean_data_ratio = parse_real(v, "sweep.values"); break;
    case SweepAxis::TRIGGER_SIZE: {
      const auto side = parse_positive(v, "sweep.values");
      c.attack.trigger.size = {side, side};
      break;
    }
    case SweepAxis::ARCHITECTURE: c.architecture = v; break;
    case SweepAxis::ITERATIONS: c.iterations = parse_positive(v, "sweep.values"); break;
  }
  return c;
}

void SweepSpec::validate() const {
  if (values.empty()) throw ValidationError("sweep.values", "must not be empty");
  for (std::size_t i = 0; i < values.size(); ++i) {
    try {
      bdkit::validate(cell(i));
    } catch (const ValidationError& e) {
      throw ValidationError("sweep.values", "value '" + values[i] + "': " + e.what());
    }
  }
}

bool ResultTable::all_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.ok(); });
}

std::string ResultTable::hash() const { return sha256_hex(to_jsonl(*this)); }

ResultTable make_table(std::string axis) {
  ResultTable t;
  t.axis = std::move(axis);
  t.created = utc_now();
  t.toolkit_version = BDKIT_VERSION;
  return t;
}

std::string to_csv(const ResultTable& t) {
  std::ostringstream s;
  s << kCsvHeader << "\n";
  for (const auto& r : t.rows) {
    const auto& m = r.metrics;
    s << quote(t.axis) << "," << quote(r.sweep_value) << "," << r.config_hash << "," << quote(r.status) << ","
      << fmt17(m.acc) << "," << fmt17(m.asr) << "," << fmt17(m.bs) << "," << fmt17(m.alpha) << ","
      << quote(m.downstream_dataset) << "," << m.seed << "," << quote(lineage_text(m.lineage)) << "," << t.created
      << "," << t.toolkit_version << "\n";
  }
  return s.str();
}

ResultTable table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw ValidationError("csv", "unexpected header");
  ResultTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 13) throw ValidationError("csv", "expected 13 columns, got " + std::to_string(f.size()));
    ResultRow r;
    t.axis = f[0];
    r.sweep_value = f[1];
    r.config_hash = f[2];
    r.status = f[3];
    r.metrics.acc = std::stod(f[4]);
    r.metrics.asr = std::stod(f[5]);
    r.metrics.bs = std::stod(f[6]);
    r.metrics.alpha = std::stod(f[7]);
    r.metrics.downstream_dataset = f[8];
    r.metrics.seed = std::stoull(f[9]);
    r.metrics.lineage = parse_lineage(f[10]);
    t.created = f[11];
    t.toolkit_version = f[12];
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::string to_jsonl(const ResultTable& t) {
  std::ostringstream s;
  s << json{{"axis", t.axis}, {"created", t.created}, {"toolkit_version", t.toolkit_version}}.dump() << "\n";
  for (const auto& r : t.rows) {
    s << json{{"config_hash", r.config_hash},
              {"sweep_value", r.sweep_value},
              {"status", r.status},
              {"metrics", evaluate::to_json(r.metrics)}}
             .dump()
      << "\n";
  }
  return s.str();
}

ResultTable table_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("jsonl", "missing header line");
  const json h = json::parse(line);
  ResultTable t;
  t.axis = h.at("axis");
  t.created = h.at("created");
  t.toolkit_version = h.at("toolkit_version");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    t.rows.push_back({j.at("config_hash"), j.at("sweep_value"), j.at("status"),
                      evaluate::metrics_from_json(j.at("metrics"))});
  }
  return t;
}

void write_table(const ResultTable& table, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, path.extension() == ".csv" ? to_csv(table) : to_jsonl(table));
}

ResultTable read_table(const fs::path& path) {
  const std::string text = read_text(path);
  return path.extension() == ".csv" ? table_from_csv(text) : table_from_jsonl(text);
}

ResultTable run_sweep(const SweepSpec& spec, ArtifactStore& store) {
  spec.validate();
  ResultTable table = make_table(std::string(to_string(spec.axis)));
  table.rows.resize(spec.values.size());
  auto run_cell = [&](std::size_t i) {
    const ExperimentConfig c = spec.cell(i);
    ResultRow& row = table.rows[i];
    row.sweep_value = spec.values[i];
    row.config_hash = config_hash(c);
    try {
      row.metrics = run_experiment(c, store);
    } catch (const std::exception& e) {
      row.status = e.what();
      std::replace(row.status.begin(), row.status.end(), '\n', ' ');
      if (row.status == "ok") row.status = "failed";
    }
  };
  if (spec.workers <= 1) {
    for (std::size_t i = 0; i < spec.values.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(spec.workers, spec.values.size()); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < spec.values.size(); i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return table;
}

ReportFormat parse_report_format(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  if (s == "CSV") return ReportFormat::CSV;
  if (s == "JSONL") return ReportFormat::JSONL;
  if (s == "PLOTS") return ReportFormat::PLOTS;
  throw ValidationError("formats", "unknown report format '" + std::string(text) + "' (CSV, JSONL, PLOTS)");
}

std::vector<fs::path> emit_report(const ResultTable& table, const std::set<ReportFormat>& formats,
                                  const fs::path& out_dir) {
  if (formats.empty()) throw ValidationError("formats", "at least one report format is required");
  if (table.rows.empty()) throw ValidationError("table", "cannot report an empty table");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create report directory " + out_dir.string());
  const std::string stem = "report-" + table.hash().substr(0, 12);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    const fs::path p = out_dir / name;
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + p.string());
    written.push_back(p);
  };

  std::vector<const ResultRow*> ok;
  for (const auto& r : table.rows)
    if (r.ok()) ok.push_back(&r);

  if (formats.count(ReportFormat::CSV)) {
    emit(stem + ".csv", to_csv(table));
    std::ostringstream s;
    s << quote(table.axis) << ",ACC(%),ASR(%),BS\n";
    for (const auto* r : ok) {
      s << quote(r->sweep_value) << "," << fixed2(100.0 * r->metrics.acc) << "," << fixed2(100.0 * r->metrics.asr)
        << "," << fixed2(r->metrics.bs) << "\n";
    }
    emit(stem + "-table.csv", s.str());
  }
  if (formats.count(ReportFormat::JSONL)) emit(stem + ".jsonl", to_jsonl(table));
  if (formats.count(ReportFormat::PLOTS)) {
    std::vector<std::string> labels;
    Series acc{"ACC", "#1f77b4", {}}, asr{"ASR", "#d62728", {}}, bs{"BS", "#2ca02c", {}};
    for (const auto* r : ok) {
      labels.push_back(r->sweep_value);
      acc.values.push_back(100.0 * r->metrics.acc);
      asr.values.push_back(100.0 * r->metrics.asr);
      bs.values.push_back(100.0 * r->metrics.bs);
    }
    const std::vector<Series> series{acc, asr, bs};
    json meta = {{"table_hash", table.hash()}, {"figures", json::array()}};
    const auto [bar_svg, bar_count] = grouped_bars("ACC / ASR / BS by " + table.axis, table.axis, labels, series);
    emit(stem + "-bars.svg", bar_svg);
    meta["figures"].push_back({{"file", stem + "-bars.svg"},
                               {"kind", "grouped_bar"},
                               {"groups", labels},
                               {"metrics", {"ACC", "ASR", "BS"}},
                               {"elements", bar_count}});
    const auto [line_svg, point_count] = lines("ACC / ASR / BS over " + table.axis, table.axis, labels, series);
    emit(stem + "-lines.svg", line_svg);
    meta["figures"].push_back({{"file", stem + "-lines.svg"},
                               {"kind", "line"},
                               {"x", labels},
                               {"metrics", {"ACC", "ASR", "BS"}},
                               {"elements", point_count}});
    emit(stem + "-plots.json", meta.dump(2) + "\n");
  }
  return written;
}

}  // namespace bdkit::bench
