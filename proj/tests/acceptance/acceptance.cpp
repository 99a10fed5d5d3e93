// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Criteria 5-9 run the SYNTH-TINY desk configuration end to end, so expect
// tens of minutes on one core unless --keep reuses a previous store.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bdkit/bench/pipeline.hpp"
#include "bdkit/bench/store.hpp"
#include "bdkit/bench/sweep.hpp"
#include "bdkit/core/config.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/data/dataset.hpp"
#include "bdkit/data/poison.hpp"
#include "bdkit/distill/distill.hpp"
#include "bdkit/evaluate/metrics.hpp"
#include "bdkit/pretrain/contrastive.hpp"

namespace fs = std::filesystem;
using namespace bdkit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

nn::Tensor random_tensor(const nn::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  nn::Tensor t(shape);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

// ---- 1. BS arithmetic -----------------------------------------------------------

struct Cell {
  double acc, asr, bs;
};

// Teacher table, rows GTSRB / SVHN / STL10 then the average row; columns FT FP ANP MOTH.
// Percentages as printed, except the BadEncoder FP average ASR: printed 29.51, the
// row mean is 24.51. Average BS cells are the mean of the per-row BS values.
const Cell kBadEncoder[4][4] = {
    {{78.25, 5.23, 0.87}, {74.21, 8.93, 0.84}, {55.44, 12.72, 0.73}, {52.97, 14.44, 0.71}},
    {{56.99, 37.06, 0.64}, {54.59, 40.02, 0.61}, {69.25, 37.02, 0.70}, {62.21, 52.63, 0.59}},
    {{68.86, 22.51, 0.76}, {63.47, 24.59, 0.72}, {57.43, 38.55, 0.63}, {63.50, 36.00, 0.67}},
    {{68.03, 21.60, 0.76}, {64.09, 24.51, 0.72}, {60.70, 29.42, 0.69}, {59.56, 34.35, 0.66}},
};
const Cell kBassl[4][4] = {
    {{79.08, 5.32, 0.88}, {77.49, 15.97, 0.83}, {61.88, 9.32, 0.77}, {50.90, 12.93, 0.71}},
    {{61.14, 23.41, 0.72}, {60.27, 24.35, 0.71}, {66.22, 9.89, 0.79}, {63.05, 73.15, 0.49}},
    {{69.23, 13.01, 0.80}, {68.67, 12.27, 0.80}, {58.65, 13.20, 0.74}, {69.21, 11.65, 0.80}},
    {{69.81, 13.91, 0.80}, {68.81, 17.53, 0.78}, {62.25, 10.80, 0.77}, {61.05, 32.57, 0.67}},
};

Outcome bs_table() {
  std::size_t cells = 0, bad = 0;
  double worst = 0.0;
  for (const auto* table : {kBadEncoder, kBassl}) {
    for (int m = 0; m < 4; ++m) {
      double mean = 0.0;
      for (int r = 0; r < 3; ++r) {
        const Cell& c = table[r][m];
        const double bs = evaluate::balanced_score(c.acc / 100.0, c.asr / 100.0, 0.5);
        mean += bs / 3.0;
        worst = std::max(worst, std::abs(bs - c.bs));
        bad += std::abs(bs - c.bs) > 0.005;
        ++cells;
      }
      const double avg_acc = (table[0][m].acc + table[1][m].acc + table[2][m].acc) / 3.0;
      const double avg_asr = (table[0][m].asr + table[1][m].asr + table[2][m].asr) / 3.0;
      // printed averages are the row means truncated (not rounded) to two decimals
      bad += std::abs(avg_acc - table[3][m].acc) >= 0.01 || std::abs(avg_asr - table[3][m].asr) >= 0.01;
      worst = std::max(worst, std::abs(mean - table[3][m].bs));
      bad += std::abs(mean - table[3][m].bs) > 0.005;
      ++cells;
    }
  }
  return {bad == 0, fmt("%zu cells, %zu off, max |BS - printed| = %.4f", cells, bad, worst)};
}

// ---- 2. metric oracles ------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(20);
  AttackSpec spec;
  spec.trigger = Trigger::solid(2, 2, {1, 1, 1});
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    const int classes = 2 + static_cast<int>(rng() % 5);
    spec.target_class = static_cast<int>(rng() % static_cast<unsigned>(classes));
    std::vector<nn::Tensor> images;
    std::vector<int> labels, clean_pred, stamped_pred;
    for (std::size_t i = 0; i < n; ++i) {
      nn::Tensor img({3, 5, 5}, 0.25);
      img[0] = static_cast<double>(i) / 100.0;  // index, outside the trigger footprint
      images.push_back(img);
      labels.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
      clean_pred.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
      stamped_pred.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
    }
    const auto ds = data::make_dataset("toy", Split::TEST, classes, images, labels);
    const evaluate::FunctionPredictor p([&](const nn::Tensor& batch) {
      std::vector<int> out;
      const std::size_t per = batch.size() / batch.dim(0);
      for (std::size_t b = 0; b < batch.dim(0); ++b) {
        const auto i = static_cast<std::size_t>(std::lround(batch[b * per] * 100.0));
        out.push_back(batch[b * per + per - 1] == 1.0 ? stamped_pred[i] : clean_pred[i]);
      }
      return out;
    });
    std::size_t correct = 0, hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      correct += clean_pred[i] == labels[i];
      hits += stamped_pred[i] == spec.target_class;
    }
    mismatches += evaluate::compute_acc(p, ds) != static_cast<double>(correct) / static_cast<double>(n);
    mismatches += evaluate::compute_asr(p, ds, spec) != static_cast<double>(hits) / static_cast<double>(n);
  }
  return {mismatches == 0, fmt("1000 trials, %zu mismatches", mismatches)};
}

// ---- 3, 4. losses --------------------------------------------------------------------

constexpr LossKind kLosses[] = {LossKind::FITNETS, LossKind::CC, LossKind::AFD,
                                LossKind::ATD,     LossKind::SP, LossKind::KD};

struct Raw {
  std::vector<nn::Tensor> st, tt;
  nn::Tensor se, te;
};

Raw random_raw(Rng& rng, std::size_t b) {
  Raw r;
  for (const nn::Shape& s : {nn::Shape{b, 3, 4, 4}, nn::Shape{b, 4, 2, 2}}) {
    r.st.push_back(random_tensor(s, rng));
    r.tt.push_back(random_tensor(s, rng));
  }
  r.se = random_tensor({b, 5}, rng);
  r.te = random_tensor({b, 5}, rng);
  return r;
}

distill::DistillBatchView view_of(const Raw& r) {
  distill::DistillBatchView v;
  for (const auto& t : r.tt) v.teacher_taps.emplace_back(t);
  for (const auto& t : r.st) v.student_taps.emplace_back(t);
  v.teacher_embedding = nn::Var(r.te);
  v.student_embedding = nn::Var(r.se);
  return v;
}

double loss_value(LossKind k, const Raw& r) { return distill::distill_loss(k, view_of(r), {}).value().item(); }

// ||analytic - central FD|| / max(||analytic||, ||FD||) over the student activations
double fd_error(LossKind k, const Raw& r, double h = 1e-6) {
  distill::DistillBatchView v = view_of(r);
  std::vector<nn::Var> leaves{nn::Var(r.st[0], true), nn::Var(r.st[1], true), nn::Var(r.se, true)};
  v.student_taps = {leaves[0], leaves[1]};
  v.student_embedding = leaves[2];
  nn::backward(distill::distill_loss(k, v, {}));
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t leaf = 0; leaf < 3; ++leaf) {
    const nn::Tensor g = leaves[leaf].grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto at = [&](double delta) {
        Raw p = r;
        nn::Tensor& t = leaf < 2 ? p.st[leaf] : p.se;
        t[i] += delta;
        return loss_value(k, p);
      };
      const double fd = (at(h) - at(-h)) / (2 * h);
      diff2 += (g[i] - fd) * (g[i] - fd);
      a2 += g[i] * g[i];
      n2 += fd * fd;
    }
  }
  const double scale = std::sqrt(std::max(a2, n2));
  return scale < 1e-12 ? 0.0 : std::sqrt(diff2) / scale;
}

Outcome loss_correctness() {
  constexpr int kViews = 50;
  Rng rng(30);
  double worst_zero = 0, worst_fd = 0;
  std::string worst_kind;
  for (LossKind k : kLosses) {
    for (int i = 0; i < kViews; ++i) {
      Raw same = random_raw(rng, 2 + rng() % 3);
      same.st = same.tt;
      same.se = same.te;
      worst_zero = std::max(worst_zero, std::abs(loss_value(k, same)));
      const double e = fd_error(k, random_raw(rng, 2 + rng() % 3));
      if (e > worst_fd) {
        worst_fd = e;
        worst_kind = std::string(to_string(k));
      }
    }
  }
  return {worst_zero <= 1e-12 && worst_fd <= 1e-4,
          fmt("%d views x 6 losses, max |loss(identical)| = %.1e, max FD rel err = %.2e (%s)", kViews, worst_zero,
              worst_fd, worst_kind.c_str())};
}

nn::Tensor permute_rows(const nn::Tensor& t, const std::vector<std::size_t>& perm) {
  nn::Tensor out = t;
  const std::size_t per = t.size() / t.dim(0);
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy_n(t.data() + perm[i] * per, per, out.data() + i * per);
  return out;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

Outcome invariances() {
  Rng rng(40);
  double scale = 0, rot = 0, perm_err = 0, ntx = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + rng() % 4;
    const Raw r = random_raw(rng, b);

    // ATD / SP (and CC) under a positive rescale of the student
    const double c = std::exp(std::uniform_real_distribution<double>(-4, 4)(rng));
    Raw s = r;
    for (auto& t : s.st)
      for (auto& v : t.storage()) v *= c;
    for (auto& v : s.se.storage()) v *= c;
    for (LossKind k : {LossKind::ATD, LossKind::SP, LossKind::CC})
      scale = std::max(scale, rel(loss_value(k, s), loss_value(k, r)));

    // CC under an orthogonal map of the student embeddings (Householder reflection)
    const nn::Tensor u = random_tensor({5}, rng);
    double un = 0;
    for (std::size_t k = 0; k < 5; ++k) un += u[k] * u[k];
    Raw q = r;
    for (std::size_t i = 0; i < b; ++i) {
      double dot = 0;
      for (std::size_t k = 0; k < 5; ++k) dot += u[k] * r.se[i * 5 + k];
      for (std::size_t k = 0; k < 5; ++k) q.se[i * 5 + k] = r.se[i * 5 + k] - 2.0 * dot / un * u[k];
    }
    rot = std::max(rot, rel(loss_value(LossKind::CC, q), loss_value(LossKind::CC, r)));

    // batch permutation, all losses
    std::vector<std::size_t> perm(b);
    for (std::size_t i = 0; i < b; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Raw p = r;
    for (auto& t : p.st) t = permute_rows(t, perm);
    for (auto& t : p.tt) t = permute_rows(t, perm);
    p.se = permute_rows(r.se, perm);
    p.te = permute_rows(r.te, perm);
    for (LossKind k : kLosses) perm_err = std::max(perm_err, rel(loss_value(k, p), loss_value(k, r)));

    // NT-Xent under per-row positive scaling of both views
    nn::Tensor a = random_tensor({b, 6}, rng), a2 = a, z = random_tensor({b, 6}, rng), z2 = z;
    for (std::size_t i = 0; i < b; ++i) {
      const double ca = 0.1 + 5.0 * (rng() % 100) / 100.0, cz = 0.1 + 5.0 * (rng() % 100) / 100.0;
      for (std::size_t d = 0; d < 6; ++d) {
        a2[i * 6 + d] *= ca;
        z2[i * 6 + d] *= cz;
      }
    }
    ntx = std::max(ntx, rel(pretrain::nt_xent_loss(nn::Var(a), nn::Var(z), 0.5).value().item(),
                            pretrain::nt_xent_loss(nn::Var(a2), nn::Var(z2), 0.5).value().item()));
  }
  const double tol = 1e-10;
  return {scale <= tol && rot <= tol && perm_err <= tol && ntx <= tol,
          fmt("max rel change: scale(ATD,SP,CC) %.1e, CC rotation %.1e, permutation %.1e, NT-Xent scale %.1e", scale,
              rot, perm_err, ntx)};
}

// ---- 5-9. tiny end-to-end -------------------------------------------------------------

ExperimentConfig tiny_base() {
  const ExperimentConfig c = load_config(fs::path(BDKIT_SOURCE_DIR) / "configs" / "synth_tiny.yaml");
  return apply_overrides(c, {"upstream_seed=1"});
}

ExperimentConfig with(const ExperimentConfig& c, const std::vector<std::string>& overrides) {
  return apply_overrides(c, overrides);
}

// Everything criteria 5-8 measure. Rerun into a fresh store for criterion 9.
struct TinyRun {
  std::map<std::string, evaluate::MetricsRecord> records;
  std::map<std::string, std::vector<double>> encoders;  // final parameters per labelled run
  std::map<std::string, double> seconds;
  // criterion 8 bookkeeping
  bool lineage_ok = false;
  std::string lineage_detail;
  bool single_shot_ok = false;
};

std::string pct(double x) { return fmt("%.1f%%", 100.0 * x); }

TinyRun run_tiny(bench::ArtifactStore& store) {
  TinyRun out;
  const ExperimentConfig base = tiny_base();
  auto clock = std::chrono::steady_clock::now();
  auto lap = [&](const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    out.seconds[name] = std::chrono::duration<double>(now - clock).count();
    clock = now;
  };

  {  // 5
    bench::Pipeline p(with(base, {"seed=1"}), store);
    out.records["clean"] = p.evaluate(p.clean_encoder());
    out.records["undefended/1"] = p.evaluate(p.poisoned_encoder());
    out.encoders["poisoned"] = p.load_encoder(p.poisoned_encoder()).flat_parameters();
  }
  lap("5");
  for (int seed = 1; seed <= 3; ++seed) {  // 6
    bench::Pipeline p(with(base, {"seed=" + std::to_string(seed)}), store);
    const std::string s = std::to_string(seed);
    if (seed > 1) out.records["undefended/" + s] = p.evaluate(p.poisoned_encoder());
    out.records["FT/" + s] = p.run();
    out.encoders["FT/" + s] = p.load_encoder(p.final_encoder()).flat_parameters();
  }
  lap("6");
  for (const char* method : {"FP", "ANP", "MOTH"}) {  // 7 (FT/1 comes from 6)
    bench::Pipeline p(with(base, {"seed=1", std::string("teacher_method=") + method}), store);
    out.records[std::string(method) + "/1"] = p.run();
    out.encoders[std::string(method) + "/1"] = p.load_encoder(p.final_encoder()).flat_parameters();
  }
  lap("7");
  {  // 8
    bench::Pipeline p3(with(base, {"seed=1", "iterations=3"}), store);
    out.records["iter3"] = p3.run();
    out.encoders["iter3"] = p3.load_encoder(p3.final_encoder()).flat_parameters();
    std::ostringstream d;
    bool ok = true;
    for (std::size_t k = 1; k < 3; ++k) {
      const ArtifactRef tea = p3.teacher(k), stu = p3.distilled(k - 1);
      const bool by_lineage = tea.lineage.size() > 1 && tea.lineage[1] == stu.lineage.front();
      const bool by_weights = p3.load_encoder(tea).metadata["teacher"]["parent_hash"] == p3.load_encoder(stu).hash();
      ok = ok && by_lineage && by_weights;
      d << "tea(" << k << ")<-stu(" << k - 1 << "): " << (by_lineage && by_weights ? "ok" : "BROKEN") << "; ";
    }
    // iteration 0 of the n=3 run is the single-shot pipeline
    bench::Pipeline p1(with(base, {"seed=1"}), store);
    const bool shared = p3.distilled(0).hash() == p1.final_encoder().hash();
    ok = ok && shared;
    d << "stu(0) shared with single-shot: " << (shared ? "yes" : "no");
    out.lineage_ok = ok;
    out.lineage_detail = d.str();

    // n=1 through the in-memory iterative scheduler vs the cached single-shot encoder
    const auto iters = distill::iterative_distill(p1.load_encoder(p1.poisoned_encoder()),
                                                  p1.load_subset(p1.clean_subset()), p1.config(), 1);
    out.single_shot_ok =
        iters.size() == 1 && iters[0].student.flat_parameters() == p1.load_encoder(p1.final_encoder()).flat_parameters();
  }
  lap("8");
  return out;
}

double param_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double d = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    n += a[i] * a[i];
  }
  return n == 0 ? std::sqrt(d) : std::sqrt(d / n);
}

// ---- 10. sweeps --------------------------------------------------------------------

Outcome sweeps(bench::ArtifactStore& store) {
  const ExperimentConfig base = with(tiny_base(), {"seed=1"});
  std::ostringstream d;
  bool ok = true;

  auto poisoned_keys = [&](const bench::SweepSpec& s) {
    std::set<std::string> keys;
    for (std::size_t i = 0; i < s.values.size(); ++i) keys.insert(bench::Pipeline(s.cell(i), store).poisoned_encoder().hash());
    return keys;
  };

  bench::SweepSpec epochs;
  epochs.axis = bench::SweepAxis::EPOCHS;
  epochs.values = {"10", "20", "30"};
  epochs.base = base;
  store.reset_stats();
  const auto te = bench::run_sweep(epochs, store);
  const auto se = store.stats();
  const bool e_ok = te.rows.size() == 3 && te.all_ok() && !se.misses.contains("attack") && poisoned_keys(epochs).size() == 1;
  d << "EPOCHS rows=" << te.rows.size() << (e_ok ? " shared" : " NOT shared/failed") << "; ";
  ok = ok && e_ok;

  bench::SweepSpec trig;
  trig.axis = bench::SweepAxis::TRIGGER_SIZE;
  trig.values = {"3", "5", "7"};
  trig.base = base;
  const auto tt = bench::run_sweep(trig, store);
  const std::size_t distinct = poisoned_keys(trig).size();
  const bool t_ok = tt.rows.size() == 3 && tt.all_ok() && distinct == 3;
  d << "TRIGGER_SIZE rows=" << tt.rows.size() << " distinct poisoned=" << distinct << "; ";
  ok = ok && t_ok;

  bench::SweepSpec ratio;
  ratio.axis = bench::SweepAxis::DATA_RATIO;
  ratio.values = {"0.05", "0.1"};
  ratio.base = base;
  store.reset_stats();
  const auto tr = bench::run_sweep(ratio, store);
  const auto sr = store.stats();
  const bool r_ok = tr.rows.size() == 2 && tr.all_ok() && !sr.misses.contains("attack") &&
                    !sr.misses.contains("pretrain") && poisoned_keys(ratio).size() == 1;
  d << "DATA_RATIO rows=" << tr.rows.size() << (r_ok ? " shares poisoned encoder" : " does NOT share");
  ok = ok && r_ok;

  for (const auto* t : {&te, &tt, &tr})
    for (const auto& row : t->rows)
      if (!row.ok()) d << " [" << t->axis << "=" << row.sweep_value << ": " << row.status << "]";
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdkit acceptance run"};
  std::string artifacts = "acceptance_artifacts";
  bool keep = false;
  std::vector<int> only;
  app.add_option("--artifacts", artifacts, "Scratch directory for the artifact stores");
  app.add_flag("--keep", keep, "Reuse the primary store from a previous run (the determinism store is always fresh)");
  app.add_option("--only", only, "Run only these criteria (5-9 are computed together)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path root(artifacts);
  const fs::path primary = root / "primary", rerun = root / "rerun";
  if (!keep) fs::remove_all(primary);
  fs::remove_all(rerun);
  fs::create_directories(root);

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  int failures = 0;
  auto report = [&](int n, const Outcome& o, double secs) {
    std::cout << "CRITERION " << n << (n < 10 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  ("
              << fmt("%.1fs", secs) << ")  " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto timed = [&](int n, const std::function<Outcome()>& f) {
    if (!wanted(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(n, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed(1, bs_table);
  timed(2, metric_oracles);
  timed(3, loss_correctness);
  timed(4, invariances);

  const bool tiny = wanted(5) || wanted(6) || wanted(7) || wanted(8) || wanted(9);
  bench::ArtifactStore store(primary);
  store.set_logger([](const std::string& line) { std::cerr << "  [store] " << line << '\n'; });
  if (tiny) {
    TinyRun run;
    try {
      run = run_tiny(store);
    } catch (const std::exception& e) {
      for (int n = 5; n <= 9; ++n)
        if (wanted(n)) report(n, {false, std::string("tiny pipeline threw: ") + e.what()}, 0.0);
      run.records.clear();
    }
    if (!run.records.empty()) {
      const auto& clean = run.records.at("clean");
      const auto& undef = run.records.at("undefended/1");
      if (wanted(5)) {
        const double gap = std::abs(clean.acc - undef.acc);
        report(5,
               {undef.asr >= 0.90 && gap <= 0.05,
                fmt("undefended ASR %s (>= 90%%), ACC clean %s vs poisoned %s (gap %.1f pts, <= 5)", pct(undef.asr).c_str(),
                    pct(clean.acc).c_str(), pct(undef.acc).c_str(), 100 * gap)},
               run.seconds.at("5"));
      }
      if (wanted(6)) {
        bool ok = true;
        std::ostringstream d;
        for (int s = 1; s <= 3; ++s) {
          const auto& u = run.records.at("undefended/" + std::to_string(s));
          const auto& f = run.records.at("FT/" + std::to_string(s));
          const double red = u.asr > 0 ? (u.asr - f.asr) / u.asr : 0.0;
          const double drop = u.acc - f.acc;
          ok = ok && red >= 0.5 && drop <= 0.15;
          d << fmt("seed %d: ASR %s->%s (-%.0f%%), ACC %s->%s (drop %.1f); ", s, pct(u.asr).c_str(), pct(f.asr).c_str(),
                   100 * red, pct(u.acc).c_str(), pct(f.acc).c_str(), 100 * drop);
        }
        report(6, {ok, d.str()}, run.seconds.at("6"));
      }
      if (wanted(7)) {
        bool ok = true;
        std::ostringstream d;
        d << "undefended " << pct(undef.asr) << "; ";
        for (const char* m : {"FT", "FP", "ANP", "MOTH"}) {
          const auto& r = run.records.at(std::string(m) + "/1");
          ok = ok && r.asr < undef.asr;
          d << m << " ASR " << pct(r.asr) << " ACC " << pct(r.acc) << "; ";
        }
        report(7, {ok, d.str()}, run.seconds.at("7"));
      }
      if (wanted(8)) {
        report(8,
               {run.lineage_ok && run.single_shot_ok,
                run.lineage_detail + "; n=1 scheduler bit-exact: " + (run.single_shot_ok ? "yes" : "no") +
                    fmt("; n=3 ASR %s ACC %s", pct(run.records.at("iter3").asr).c_str(),
                        pct(run.records.at("iter3").acc).c_str())},
               run.seconds.at("8"));
      }
      if (wanted(9)) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
          bench::ArtifactStore fresh(rerun);
          const TinyRun again = run_tiny(fresh);
          std::size_t differ = 0;
          double worst = 0;
          for (const auto& [k, r] : run.records) differ += !again.records.contains(k) || !(again.records.at(k) == r);
          for (const auto& [k, p] : run.encoders)
            worst = std::max(worst, again.encoders.contains(k) ? param_rel_diff(p, again.encoders.at(k)) : INFINITY);
          o = {differ == 0 && worst <= 1e-6 && again.lineage_ok == run.lineage_ok,
               fmt("%zu MetricsRecords compared, %zu differ; %zu encoders, max rel param diff %.1e", run.records.size(),
                   differ, run.encoders.size(), worst)};
        } catch (const std::exception& e) {
          o = {false, std::string("rerun threw: ") + e.what()};
        }
        report(9, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    }
  }

  timed(10, [&] { return sweeps(store); });

  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : fmt("%d CRITERIA FAIL", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
