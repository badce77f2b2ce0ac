#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <posfuse/posfuse.hpp>

namespace fs = std::filesystem;
using namespace posfuse;

namespace {

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::vector<std::string> sets;
};

KeyValues load_config(const CommonArgs& a) {
  KeyValues kv = a.config.empty() ? KeyValues{} : load_key_values(a.config);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[detail::trim(std::string_view(s).substr(0, eq))] =
        detail::trim(std::string_view(s).substr(eq + 1));
  }
  return kv;
}

void print_record(const RunRecord& r) {
  std::printf("%s  acc=%.4f  train=%.1fs  latency=%.3fms  params=%zu (fusion %zu)  %s%s%s\n",
              r.run_id.c_str(), r.test_accuracy, r.train_seconds, r.latency.mean_ms,
              r.params.total, r.params.fusion_only, r.status.c_str(),
              r.message.empty() ? "" : ": ", r.message.c_str());
}

int cmd_train(const CommonArgs& a, const std::string& save_path) {
  const KeyValues kv = load_config(a);
  GridSpec spec = GridSpec::from_key_values(kv);
  TrainConfig tc = spec.train;
  tc.seed = apply_seed_offset(tc.seed);
  const Task task = make_task(spec.task, spec.model.vocab_size, spec.model.max_length,
                              spec.model.n_classes);
  const fs::path out = a.out;
  fs::create_directories(out);
  {
    KeyValues echo = spec.task.to_key_values();
    echo.merge(spec.model.to_key_values());
    echo.merge(tc.to_key_values());
    write_text(out / "config.txt", format_key_values(echo));
  }
  RunRecord rec = run_training(spec.model, tc, task, [&](Model& trained) {
    if (!save_path.empty()) save_checkpoint(trained, save_path);
  });
  RunsWriter(out / "runs.csv").append(rec);
  write_loss_trace(out / "traces", rec);
  print_record(rec);
  if (!save_path.empty()) std::printf("checkpoint written to %s\n", save_path.c_str());
  return rec.status == "ok" ? 0 : 2;
}

int cmd_grid(const CommonArgs& a, std::size_t jobs) {
  GridSpec spec = GridSpec::from_key_values(load_config(a));
  spec.out_dir = a.out;
  if (jobs) spec.jobs = jobs;
  const auto records = run_grid(spec);
  for (const auto& r : records) print_record(r);
  std::printf("%zu new run(s) appended to %s\n", records.size(),
              (spec.out_dir / "runs.csv").string().c_str());
  return 0;
}

int cmd_deltas(const CommonArgs& a, const std::string& baseline, const std::string& variant) {
  const fs::path out = a.out;
  const auto records = read_runs_csv(out / "runs.csv");
  const auto groups =
      paired_deltas(records, parse_fusion_kind(baseline), parse_fusion_kind(variant));
  std::string csv = std::string(kDeltasHeader) + "\n";
  for (const auto& g : groups) {
    std::printf("%s / %s: %s - %s\n", g.task.c_str(), to_string(g.pe_family).c_str(),
                variant.c_str(), baseline.c_str());
    for (const auto& d : g.deltas) {
      std::printf("  seed %-6llu %+.4f  (%.4f -> %.4f)\n",
                  static_cast<unsigned long long>(d.seed), d.delta, d.baseline_acc,
                  d.variant_acc);
      csv += to_csv_row(d) + "\n";
    }
    std::printf("  mean delta %+.4f, sign consistency %.2f over %zu seed(s)\n", g.mean_delta,
                g.sign_consistency, g.deltas.size());
    for (auto s : g.excluded_seeds)
      std::printf("  excluded seed %llu (missing or aborted on one side)\n",
                  static_cast<unsigned long long>(s));
  }
  write_text(out / "deltas.csv", csv);
  return 0;
}

int cmd_report(const CommonArgs& a, const std::string& baseline) {
  const auto res = report(a.out, parse_fusion_kind(baseline));
  for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  for (const auto& r : res.summary) {
    std::printf("%-16s %-17s %-12s n=%zu  acc %.4f", r.task.c_str(),
                to_string(r.pe_family).c_str(), to_string(r.fusion).c_str(), r.n,
                r.mean_accuracy);
    if (r.std_accuracy) std::printf(" +/- %.4f", *r.std_accuracy);
    std::printf("\n");
  }
  for (const auto& p : res.plots) std::printf("wrote %s\n", p.string().c_str());
  return 0;
}

int cmd_latency(const CommonArgs& a, std::size_t length, std::size_t warmup, std::size_t trials) {
  const KeyValues kv = load_config(a);
  GridSpec spec = GridSpec::from_key_values(kv);
  ModelConfig mc = spec.model;
  if (length > mc.max_length) mc.max_length = length;
  std::vector<FusionKind> fusions(std::begin(kAllFusionKinds), std::end(kAllFusionKinds));
  if (kv.count("fusions")) fusions = spec.fusions;
  std::string csv = "fusion,length,ops_per_token,latency_ms_mean,latency_ms_median,latency_ms_std\n";
  std::printf("%-12s %8s %14s %12s %12s %10s\n", "fusion", "L", "ops/token", "mean ms",
              "median ms", "std ms");
  for (FusionKind f : fusions) {
    mc.fusion = f;
    const auto r = latency_bench(mc, length, warmup, trials, apply_seed_offset(spec.train.seed));
    std::printf("%-12s %8zu %14zu %12.3f %12.3f %10.3f\n", to_string(f).c_str(), r.length,
                r.fusion_ops_per_token, r.stats.mean_ms, r.stats.median_ms, r.stats.std_ms);
    csv += to_string(f) + "," + std::to_string(r.length) + "," +
           std::to_string(r.fusion_ops_per_token) + "," + format_number(r.stats.mean_ms) + "," +
           format_number(r.stats.median_ms) + "," + format_number(r.stats.std_ms) + "\n";
  }
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "latency.csv", csv);
  return 0;
}

int cmd_gradcheck() {
  const auto reports = run_gradcheck_suite();
  double worst = 0.0;
  for (const auto& r : reports) {
    std::printf("%-40s max rel err %.3e\n", r.label.c_str(), r.max_error());
    worst = std::max(worst, r.max_error());
  }
  const bool ok = worst <= kGradCheckTolerance;
  std::printf("max relative error %.3e (tolerance %.0e): %s\n", worst, kGradCheckTolerance,
              ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Positional-encoding fusion laboratory"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", common.config, "flat key = value config file");
      sub->add_option("--set", common.sets, "override a config key (key=value)");
    }
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
  };

  std::string save_path;
  auto* train = app.add_subcommand("train", "train one (pe_family, fusion, seed) run");
  add_common(train, true);
  train->add_option("--save", save_path, "write a checkpoint of the trained model");

  std::size_t jobs = 0;
  auto* grid = app.add_subcommand("grid", "run the pe_family x fusion x seed grid");
  add_common(grid, true);
  grid->add_option("--jobs", jobs, "cells to run in parallel");

  std::string baseline = "add", variant = "gate_scalar";
  auto* deltas = app.add_subcommand("deltas", "paired per-seed accuracy deltas");
  add_common(deltas, false);
  deltas->add_option("--baseline", baseline)->capture_default_str();
  deltas->add_option("--variant", variant)->capture_default_str();

  auto* rep = app.add_subcommand("report", "summary.csv, deltas.csv and SVG plots from runs.csv");
  add_common(rep, false);
  rep->add_option("--baseline", baseline)->capture_default_str();

  std::size_t length = 512, warmup = 3, trials = 10;
  auto* lat = app.add_subcommand("latency", "single-example inference latency per fusion");
  add_common(lat, true);
  lat->add_option("-L,--length", length)->capture_default_str();
  lat->add_option("--warmup", warmup)->capture_default_str();
  lat->add_option("--trials", trials)->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(common, save_path);
    if (*grid) return cmd_grid(common, jobs);
    if (*deltas) return cmd_deltas(common, baseline, variant);
    if (*rep) return cmd_report(common, baseline);
    if (*lat) return cmd_latency(common, length, warmup, trials);
    if (*gc) return cmd_gradcheck();
  } catch (const posfuse::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
