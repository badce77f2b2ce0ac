#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "model.hpp"
#include "svg.hpp"
#include "train.hpp"

namespace posfuse {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ runs.csv

inline constexpr const char* kRunsHeader =
    "run_id,task,pe_family,fusion,seed,test_acc,train_seconds,latency_ms_mean,"
    "latency_ms_median,params_total,params_fusion,status";

inline std::string to_csv_row(const RunRecord& r) {
  std::string s;
  s += r.run_id + "," + r.task + "," + to_string(r.pe_family) + "," + to_string(r.fusion) + ",";
  s += std::to_string(r.seed) + "," + format_number(r.test_accuracy) + ",";
  s += format_number(r.train_seconds) + "," + format_number(r.latency.mean_ms) + ",";
  s += format_number(r.latency.median_ms) + "," + std::to_string(r.params.total) + ",";
  s += std::to_string(r.params.fusion_only) + "," + r.status;
  return s;
}

inline RunRecord parse_csv_row(const std::string& line, std::size_t lineno = 0) {
  const auto f = split_list(line, ',');
  auto fail = [&](const std::string& why) {
    return DataError("runs.csv line " + std::to_string(lineno) + ": " + why);
  };
  if (f.size() != 12) throw fail("expected 12 fields, got " + std::to_string(f.size()));
  RunRecord r;
  try {
    r.run_id = f[0];
    r.task = f[1];
    r.pe_family = parse_pe_kind(f[2]);
    r.fusion = parse_fusion_kind(f[3]);
    r.seed = parse_number<std::uint64_t>("seed", f[4]);
    r.test_accuracy = parse_number<double>("test_acc", f[5]);
    r.train_seconds = parse_number<double>("train_seconds", f[6]);
    r.latency.mean_ms = parse_number<double>("latency_ms_mean", f[7]);
    r.latency.median_ms = parse_number<double>("latency_ms_median", f[8]);
    r.params.total = parse_number<std::size_t>("params_total", f[9]);
    r.params.fusion_only = parse_number<std::size_t>("params_fusion", f[10]);
    r.status = f[11];
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  return r;
}

inline std::vector<RunRecord> read_runs_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot read " + path.string() +
                    "; run `posfuse grid` or `posfuse train` with --out first");
  }
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != kRunsHeader) throw DataError(path.string() + ": unexpected header");
      continue;
    }
    out.push_back(parse_csv_row(line, lineno));
  }
  return out;
}

// Appends rows, writing the header first if the file is new or empty.
class RunsWriter {
 public:
  explicit RunsWriter(fs::path path) : path_(std::move(path)) {}

  void append(const RunRecord& r) {
    std::lock_guard lock(mu_);
    const bool fresh = !fs::exists(path_) || fs::file_size(path_) == 0;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw DataError("cannot append to " + path_.string());
    if (fresh) out << kRunsHeader << '\n';
    out << to_csv_row(r) << '\n';
  }

 private:
  fs::path path_;
  std::mutex mu_;
};

inline void write_loss_trace(const fs::path& dir, const RunRecord& r) {
  fs::create_directories(dir);
  std::ofstream out(dir / (r.run_id + ".csv"));
  out << "step,loss\n";
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
    out << i + 1 << ',' << format_number(r.loss_trace[i]) << '\n';
}

// ------------------------------------------------------------------ grid

// Adds POSFUSE_SEED_OFFSET (when set) to a seed.
inline std::uint64_t apply_seed_offset(std::uint64_t seed) {
  const char* env = std::getenv("POSFUSE_SEED_OFFSET");
  if (!env || !*env) return seed;
  return seed + parse_number<std::uint64_t>("POSFUSE_SEED_OFFSET", env);
}

struct GridSpec {
  TaskSpec task;
  ModelConfig model;
  TrainConfig train;
  std::vector<PeKind> pe_families{PeKind::Sinusoidal};
  std::vector<FusionKind> fusions{FusionKind::Add, FusionKind::GateScalar};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  fs::path out_dir = "out";
  std::size_t jobs = 1;

  void validate() const {
    if (seeds.empty()) throw ConfigError("grid needs at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("grid seeds must be distinct");
    if (pe_families.empty() || fusions.empty())
      throw ConfigError("grid needs at least one pe_family and one fusion");
    if (jobs == 0) throw ConfigError("jobs must be positive");
  }

  static GridSpec from_key_values(const KeyValues& kv) {
    GridSpec g;
    g.task = TaskSpec::from_key_values(kv);
    g.model = ModelConfig::from_key_values(kv);
    g.train = TrainConfig::from_key_values(kv);
    if (auto it = kv.find("pe_families"); it != kv.end()) {
      g.pe_families.clear();
      for (const auto& s : split_list(it->second)) g.pe_families.push_back(parse_pe_kind(s));
    }
    if (auto it = kv.find("fusions"); it != kv.end()) {
      g.fusions.clear();
      for (const auto& s : split_list(it->second)) g.fusions.push_back(parse_fusion_kind(s));
    }
    if (auto it = kv.find("seeds"); it != kv.end()) {
      g.seeds.clear();
      for (const auto& s : split_list(it->second))
        g.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
    }
    if (auto it = kv.find("jobs"); it != kv.end())
      g.jobs = parse_number<std::size_t>("jobs", it->second);
    g.validate();
    return g;
  }

  // Every effective setting, for provenance.
  KeyValues to_key_values() const {
    KeyValues kv = task.to_key_values();
    kv.merge(model.to_key_values());
    kv.merge(train.to_key_values());
    std::string pes, fus, sds;
    for (auto p : pe_families) pes += (pes.empty() ? "" : ",") + to_string(p);
    for (auto f : fusions) fus += (fus.empty() ? "" : ",") + to_string(f);
    for (auto s : seeds) sds += (sds.empty() ? "" : ",") + std::to_string(s);
    kv["pe_families"] = pes;
    kv["fusions"] = fus;
    kv["seeds"] = sds;
    kv["jobs"] = std::to_string(jobs);
    return kv;
  }
};

struct GridCell {
  PeKind pe;
  FusionKind fusion;
  std::uint64_t seed;
};

inline std::vector<GridCell> grid_cells(const GridSpec& spec) {
  std::vector<GridCell> cells;
  for (PeKind pe : spec.pe_families)
    for (FusionKind f : spec.fusions)
      for (std::uint64_t s : spec.seeds) cells.push_back({pe, f, apply_seed_offset(s)});
  return cells;
}

// Runs every (pe, fusion, seed) cell not already present in runs.csv and
// appends one row per finished cell. Returns the newly produced records.
inline std::vector<RunRecord> run_grid(const GridSpec& spec) {
  spec.validate();
  fs::create_directories(spec.out_dir);
  {
    std::ofstream cfg(spec.out_dir / "config.txt");
    cfg << format_key_values(spec.to_key_values());
  }
  const fs::path runs_path = spec.out_dir / "runs.csv";
  std::set<std::string> done;
  if (fs::exists(runs_path))
    for (const auto& r : read_runs_csv(runs_path)) done.insert(r.run_id);

  const Task task = make_task(spec.task, spec.model.vocab_size, spec.model.max_length,
                              spec.model.n_classes);
  std::vector<GridCell> todo;
  for (const auto& c : grid_cells(spec))
    if (!done.count(make_run_id(task.name, c.pe, c.fusion, c.seed))) todo.push_back(c);

  RunsWriter writer(runs_path);
  std::vector<std::optional<RunRecord>> results(todo.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < todo.size();) {
      const GridCell& c = todo[i];
      ModelConfig mc = spec.model;
      mc.pe_family = c.pe;
      mc.fusion = c.fusion;
      TrainConfig tc = spec.train;
      tc.seed = c.seed;
      RunRecord rec;
      try {
        rec = run_training(mc, tc, task);
      } catch (const std::exception& e) {
        rec.run_id = make_run_id(task.name, c.pe, c.fusion, c.seed);
        rec.task = task.name;
        rec.pe_family = c.pe;
        rec.fusion = c.fusion;
        rec.seed = c.seed;
        rec.status = "aborted";
        rec.message = e.what();
      }
      writer.append(rec);
      write_loss_trace(spec.out_dir / "traces", rec);
      results[i] = std::move(rec);
    }
  };
  const std::size_t n_threads = std::min(spec.jobs, std::max<std::size_t>(1, todo.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<RunRecord> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

// ------------------------------------------------------------------ paired deltas

struct PairedDelta {
  std::string task;
  PeKind pe_family = PeKind::Sinusoidal;
  std::uint64_t seed = 0;
  FusionKind baseline = FusionKind::Add;
  FusionKind variant = FusionKind::Add;
  double baseline_acc = 0.0;
  double variant_acc = 0.0;
  double delta = 0.0;
};

struct PairedDeltaGroup {
  std::string task;
  PeKind pe_family = PeKind::Sinusoidal;
  std::vector<PairedDelta> deltas;  // ordered by seed
  std::vector<std::uint64_t> excluded_seeds;
  double mean_delta = 0.0;
  double sign_consistency = 0.0;  // share of strictly positive deltas
};

// Pairs runs of `variant` with runs of `baseline` that share task, PE family
// and seed. Seeds present on only one side, or aborted on either, are
// excluded and listed. Throws if no group has any overlapping seed.
inline std::vector<PairedDeltaGroup> paired_deltas(const std::vector<RunRecord>& records,
                                                   FusionKind baseline, FusionKind variant) {
  using Key = std::pair<std::string, std::string>;  // task, pe
  std::map<Key, std::map<std::uint64_t, const RunRecord*>> base, var;
  for (const auto& r : records) {
    const Key k{r.task, to_string(r.pe_family)};
    if (r.fusion == baseline) base[k][r.seed] = &r;
    if (r.fusion == variant) var[k][r.seed] = &r;
  }
  std::vector<PairedDeltaGroup> out;
  std::set<Key> keys;
  for (const auto& [k, _] : base) keys.insert(k);
  for (const auto& [k, _] : var) keys.insert(k);
  for (const auto& k : keys) {
    PairedDeltaGroup g;
    g.task = k.first;
    g.pe_family = parse_pe_kind(k.second);
    std::set<std::uint64_t> seeds;
    for (const auto& [s, _] : base[k]) seeds.insert(s);
    for (const auto& [s, _] : var[k]) seeds.insert(s);
    for (std::uint64_t s : seeds) {
      auto b = base[k].find(s);
      auto v = var[k].find(s);
      if (b == base[k].end() || v == var[k].end() || b->second->status != "ok" ||
          v->second->status != "ok") {
        g.excluded_seeds.push_back(s);
        continue;
      }
      const double ba = b->second->test_accuracy, va = v->second->test_accuracy;
      g.deltas.push_back({g.task, g.pe_family, s, baseline, variant, ba, va, va - ba});
    }
    if (g.deltas.empty()) continue;
    std::size_t positive = 0;
    for (const auto& d : g.deltas) {
      g.mean_delta += d.delta;
      positive += d.delta > 0.0;
    }
    g.mean_delta /= static_cast<double>(g.deltas.size());
    g.sign_consistency = static_cast<double>(positive) / static_cast<double>(g.deltas.size());
    out.push_back(std::move(g));
  }
  if (out.empty()) {
    throw DataError("no overlapping seeds between fusion '" + to_string(baseline) + "' and '" +
                    to_string(variant) + "'");
  }
  return out;
}

inline constexpr const char* kDeltasHeader =
    "task,pe_family,seed,baseline,variant,baseline_acc,variant_acc,delta";

inline std::string to_csv_row(const PairedDelta& d) {
  return d.task + "," + to_string(d.pe_family) + "," + std::to_string(d.seed) + "," +
         to_string(d.baseline) + "," + to_string(d.variant) + "," +
         format_number(d.baseline_acc) + "," + format_number(d.variant_acc) + "," +
         format_number(d.delta);
}

// ------------------------------------------------------------------ summary

struct SummaryRow {
  std::string task;
  PeKind pe_family = PeKind::Sinusoidal;
  FusionKind fusion = FusionKind::Add;
  double mean_accuracy = 0.0;
  std::optional<double> std_accuracy;  // sample std, absent when n < 2
  double mean_latency_ms = 0.0;
  std::size_t n = 0;
};

// Groups successful runs by (task, pe_family, fusion). Values are sorted
// before summation so the result does not depend on record order.
inline std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : records) {
    if (r.status != "ok") continue;
    auto& g = groups[{r.task, to_string(r.pe_family), to_string(r.fusion)}];
    g.first.push_back(r.test_accuracy);
    g.second.push_back(r.latency.mean_ms);
  }
  std::vector<SummaryRow> out;
  for (auto& [key, vals] : groups) {
    auto& acc = vals.first;
    auto& lat = vals.second;
    std::sort(acc.begin(), acc.end());
    std::sort(lat.begin(), lat.end());
    SummaryRow row;
    row.task = std::get<0>(key);
    row.pe_family = parse_pe_kind(std::get<1>(key));
    row.fusion = parse_fusion_kind(std::get<2>(key));
    row.n = acc.size();
    for (double a : acc) row.mean_accuracy += a;
    row.mean_accuracy /= static_cast<double>(row.n);
    for (double l : lat) row.mean_latency_ms += l;
    row.mean_latency_ms /= static_cast<double>(row.n);
    if (row.n >= 2) {
      double ss = 0.0;
      for (double a : acc) ss += (a - row.mean_accuracy) * (a - row.mean_accuracy);
      row.std_accuracy = std::sqrt(ss / static_cast<double>(row.n - 1));
    }
    out.push_back(row);
  }
  return out;
}

inline constexpr const char* kSummaryHeader =
    "task,pe_family,fusion,n,mean_acc,std_acc,mean_latency_ms";

inline std::string to_csv_row(const SummaryRow& r) {
  return r.task + "," + to_string(r.pe_family) + "," + to_string(r.fusion) + "," +
         std::to_string(r.n) + "," + format_number(r.mean_accuracy) + "," +
         (r.std_accuracy ? format_number(*r.std_accuracy) : std::string()) + "," +
         format_number(r.mean_latency_ms);
}

// ------------------------------------------------------------------ latency

struct LatencyBenchResult {
  FusionKind fusion = FusionKind::Add;
  std::size_t length = 0;
  LatencyStats stats;
  std::size_t fusion_ops_per_token = 0;
};

// Single-example inference timing at sequence length L plus the exact
// fusion-stage operation count per token.
inline LatencyBenchResult latency_bench(const ModelConfig& cfg, std::size_t L,
                                        std::size_t n_warmup, std::size_t n_trials,
                                        std::uint64_t seed = 0) {
  if (n_warmup < 3) throw ConfigError("latency_bench: need at least 3 warmup runs");
  if (n_trials < 10) throw ConfigError("latency_bench: need at least 10 timed trials");
  if (L > cfg.max_length) {
    throw LengthError("latency_bench: L = " + std::to_string(L) + " exceeds max_length " +
                      std::to_string(cfg.max_length));
  }
  Model model(cfg, seed);
  Rng rng = make_rng(seed, Stream::Misc);
  std::uniform_int_distribution<int> tok(2, static_cast<int>(cfg.vocab_size) - 1);
  Example ex;
  ex.tokens.resize(L);
  for (int& t : ex.tokens) t = tok(rng);
  LatencyBenchResult r;
  r.fusion = cfg.fusion;
  r.length = L;
  r.stats = time_forward(model, ex, n_warmup, n_trials);
  r.fusion_ops_per_token = fusion_ops_per_token(cfg.fusion, cfg.d_model, cfg.gate_cnn_k);
  return r;
}

// ------------------------------------------------------------------ report

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

inline std::string sanitize(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

inline std::string delta_chart(const PairedDeltaGroup& g) {
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const auto& d : g.deltas) {
    labels.push_back("seed " + std::to_string(d.seed));
    values.push_back(d.delta);
  }
  const auto& d0 = g.deltas.front();
  return svg::bar_chart("Paired per-seed accuracy deltas (" + to_string(d0.variant) + " - " +
                            to_string(d0.baseline) + "), " + g.task + ", " +
                            to_string(g.pe_family),
                        labels, values, "accuracy delta", 3);
}

struct ReportResult {
  std::vector<SummaryRow> summary;
  std::vector<PairedDeltaGroup> deltas;
  std::vector<fs::path> plots;
  std::vector<std::string> warnings;
};

// Regenerates summary.csv, deltas.csv and SVG plots from runs.csv. Output is
// a pure function of runs.csv contents and the baseline choice.
inline ReportResult report(const fs::path& out_dir, FusionKind baseline = FusionKind::Add) {
  const fs::path runs_path = out_dir / "runs.csv";
  if (!fs::exists(runs_path)) {
    throw DataError("no runs.csv in " + out_dir.string() +
                    "; run `posfuse grid --config <file> --out " + out_dir.string() + "` first");
  }
  ReportResult res;
  const auto records = read_runs_csv(runs_path);
  res.summary = summarize(records);

  std::string summary_csv = std::string(kSummaryHeader) + "\n";
  for (const auto& r : res.summary) summary_csv += to_csv_row(r) + "\n";
  write_text(out_dir / "summary.csv", summary_csv);

  std::string deltas_csv = std::string(kDeltasHeader) + "\n";
  if (records.empty()) {
    res.warnings.push_back("runs.csv has no records; nothing to plot");
    write_text(out_dir / "deltas.csv", deltas_csv);
    return res;
  }

  std::set<FusionKind> present;
  for (const auto& r : records) present.insert(r.fusion);
  for (FusionKind v : kAllFusionKinds) {
    if (v == baseline || !present.count(v) || !present.count(baseline)) continue;
    std::vector<PairedDeltaGroup> groups;
    try {
      groups = paired_deltas(records, baseline, v);
    } catch (const DataError& e) {
      res.warnings.push_back(e.what());
      continue;
    }
    for (auto& g : groups) {
      for (const auto& d : g.deltas) deltas_csv += to_csv_row(d) + "\n";
      if (!g.excluded_seeds.empty()) {
        std::string s;
        for (auto seed : g.excluded_seeds) s += " " + std::to_string(seed);
        res.warnings.push_back(g.task + "/" + to_string(g.pe_family) + " " + to_string(v) +
                               " vs " + to_string(baseline) + ": excluded seeds" + s);
      }
      const fs::path plot = out_dir / ("deltas_" + sanitize(g.task) + "_" +
                                       to_string(g.pe_family) + "_" + to_string(v) + "_vs_" +
                                       to_string(baseline) + ".svg");
      write_text(plot, delta_chart(g));
      res.plots.push_back(plot);
      res.deltas.push_back(std::move(g));
    }
  }
  write_text(out_dir / "deltas.csv", deltas_csv);

  // Grouped accuracy and latency bars per task: groups = PE family, series = fusion.
  std::map<std::string, std::vector<const SummaryRow*>> by_task;
  for (const auto& r : res.summary) by_task[r.task].push_back(&r);
  for (const auto& [task, rows] : by_task) {
    std::vector<std::string> groups, series;
    for (PeKind p : kAllPeKinds)
      for (const auto* r : rows)
        if (r->pe_family == p) {
          groups.push_back(to_string(p));
          break;
        }
    for (FusionKind f : kAllFusionKinds)
      for (const auto* r : rows)
        if (r->fusion == f) {
          series.push_back(to_string(f));
          break;
        }
    std::vector<std::vector<double>> acc(groups.size(), std::vector<double>(series.size(), NAN));
    auto lat = acc;
    for (const auto* r : rows) {
      const auto gi = std::find(groups.begin(), groups.end(), to_string(r->pe_family)) - groups.begin();
      const auto si = std::find(series.begin(), series.end(), to_string(r->fusion)) - series.begin();
      acc[gi][si] = r->mean_accuracy;
      lat[gi][si] = r->mean_latency_ms;
    }
    const fs::path acc_plot = out_dir / ("accuracy_" + sanitize(task) + ".svg");
    write_text(acc_plot, svg::grouped_bar_chart("Mean test accuracy by fusion, " + task, groups,
                                                series, acc, "accuracy", 3));
    const fs::path lat_plot = out_dir / ("latency_" + sanitize(task) + ".svg");
    write_text(lat_plot, svg::grouped_bar_chart("Mean inference latency by fusion, " + task,
                                                groups, series, lat, "ms", 3));
    res.plots.push_back(acc_plot);
    res.plots.push_back(lat_plot);
  }
  return res;
}

}  // namespace posfuse
