// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include <posfuse/posfuse.hpp>

using namespace posfuse;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kIdentityTolerance = 1e-12;
constexpr int kConvexTrials = 1000;
constexpr double kMarkerAccuracyFloor = 0.90;
constexpr double kAblationCeiling = 0.60;
constexpr double kRunBudgetSeconds = 300.0;
constexpr std::size_t kLatencyLength = 512;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

Tensor random_tensor(Shape s, Rng& rng, double stddev = 1.0) {
  return normal_tensor(std::move(s), rng, 0.0, stddev);
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_label;
  std::set<std::string> models;
  for (const auto& r : reports) {
    if (r.max_error() >= worst) {
      worst = r.max_error();
      worst_label = r.label;
    }
    if (r.label.rfind("model ", 0) == 0) models.insert(r.label);
  }
  for (PeKind pe : {PeKind::Sinusoidal, PeKind::LearnedAbsolute, PeKind::Rope, PeKind::Relative})
    for (FusionKind f : kAllFusionKinds) {
      const std::string label = "model " + to_string(pe) + "+" + to_string(f);
      o.require(models.count(label), "missing " + label);
    }
  o.require(worst <= kGradTolerance, "max rel err " + fmt("%.3e", worst) + " at " + worst_label);
  o.require(secs <= kGradBudgetSeconds, "took " + fmt("%.1f", secs) + "s");
  o.detail = "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(reports.size()) +
             " checks in " + fmt("%.1f", secs) + "s" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome algebraic_identities() {
  Outcome o;
  Rng rng(2024);
  double worst_identity = 0.0;
  for (std::size_t d : {2u, 8u, 32u}) {
    const std::size_t L = 13;
    const Tensor e = random_tensor({L, d}, rng, 3.0), p = random_tensor({L, d}, rng, 3.0);
    Tensor w({d, 2 * d});
    for (std::size_t i = 0; i < d; ++i) w(i, i) = w(i, d + i) = 1.0;
    Tape t;
    const Tensor& concat = fuse_concat(t.constant(e), t.constant(p), t.constant(w)).value();
    for (std::size_t i = 0; i < concat.size(); ++i)
      worst_identity = std::max(worst_identity, std::abs(concat[i] - (e[i] + p[i])));
    for (FusionKind k : {FusionKind::GateScalar, FusionKind::GateCnn, FusionKind::GateMlp}) {
      Rng init(d);
      FusionOp op(k, d, 3, init);
      for (auto* param : op.parameters())
        if (param->name != "fusion.mlp.w1") param->value = Tensor(param->value.shape());
      const Tensor& h = op.apply(t, t.constant(e), t.constant(p)).h.value();
      for (std::size_t i = 0; i < h.size(); ++i)
        worst_identity = std::max(worst_identity, std::abs(h[i] - 0.5 * (e[i] + p[i])));
    }
  }
  o.require(worst_identity <= kIdentityTolerance,
            "identity error " + fmt("%.3e", worst_identity));

  std::size_t gate_violations = 0, bound_violations = 0;
  for (int trial = 0; trial < kConvexTrials; ++trial) {
    const FusionKind k = std::array{FusionKind::GateScalar, FusionKind::GateCnn,
                                    FusionKind::GateMlp}[static_cast<std::size_t>(trial % 3)];
    const std::size_t d = 2 + 2 * static_cast<std::size_t>(trial % 5);
    const std::size_t L = 1 + static_cast<std::size_t>(trial % 17);
    Rng init(static_cast<std::uint64_t>(trial));
    FusionOp op(k, d, trial % 4, init);
    const double scale = trial % 2 ? 1.0 : 20.0;
    for (auto* param : op.parameters()) fill_normal(param->value, rng, 0.0, scale);
    const Tensor e = random_tensor({L, d}, rng, scale), p = random_tensor({L, d}, rng, scale);
    Tape t;
    auto out = op.apply(t, t.constant(e), t.constant(p));
    for (double g : out.gate->value().values()) gate_violations += !(g > 0.0 && g < 1.0);
    const Tensor& h = out.h.value();
    for (std::size_t i = 0; i < h.size(); ++i)
      bound_violations += h[i] < std::min(e[i], p[i]) || h[i] > std::max(e[i], p[i]);
  }
  o.require(gate_violations == 0, std::to_string(gate_violations) + " gate values outside (0,1)");
  o.require(bound_violations == 0, std::to_string(bound_violations) + " convex-bound violations");
  o.detail = "identity err " + fmt("%.1e", worst_identity) + ", " +
             std::to_string(kConvexTrials) + " random gated inputs, " +
             std::to_string(gate_violations + bound_violations) + " violations" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 3

Outcome parameter_counts() {
  Outcome o;
  const std::size_t d = 32, K = 3;
  const std::size_t expected[] = {0, 2 * d * d, 2 * d + 1, d * (2 * K + 1),
                                  (2 * d * d + d) + (d * d + d)};
  const std::size_t literal[] = {0, 2048, 65, 224, 3136};
  std::string got;
  ModelConfig c;
  c.d_model = d;
  c.gate_cnn_k = static_cast<int>(K);
  for (std::size_t i = 0; i < 5; ++i) {
    c.fusion = kAllFusionKinds[i];
    Model m(c, 0);
    const std::size_t n = m.count_params().fusion_only;
    got += (i ? "/" : "") + std::to_string(n);
    o.require(n == expected[i] && n == literal[i],
              to_string(c.fusion) + " has " + std::to_string(n));
  }
  o.detail = "fusion_only at d=32, K=3: " + got + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 4

std::string metric_fields(const RunRecord& r) {
  return r.run_id + "," + format_number(r.test_accuracy) + "," + std::to_string(r.params.total) +
         "," + std::to_string(r.params.fusion_only) + "," + r.status;
}

Outcome paired_seed_fidelity() {
  Outcome o;
  TaskSpec spec;
  spec.n = 400;
  spec.length = 32;
  ModelConfig mc;
  const Task task = make_task(spec, mc.vocab_size, mc.max_length, mc.n_classes);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig a = mc, b = mc;
    a.fusion = FusionKind::Add;
    b.fusion = FusionKind::GateScalar;
    Model ma(a, seed), mb(b, seed);
    o.require(ma.find("embed.tok")->value == mb.find("embed.tok")->value,
              "embedding differs for seed " + std::to_string(seed));
    // The order each run consumes, recomputed independently per fusion.
    const auto oa = batch_iter(task.train, 32, seed, 0), ob = batch_iter(task.train, 32, seed, 0);
    bool same = oa.size() == ob.size();
    for (std::size_t i = 0; same && i < oa.size(); ++i) same = oa[i].tokens == ob[i].tokens;
    o.require(same, "epoch-0 order differs for seed " + std::to_string(seed));
  }
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 3;
  std::size_t identical = 0;
  for (FusionKind f : {FusionKind::Add, FusionKind::GateScalar}) {
    ModelConfig c = mc;
    c.fusion = f;
    const RunRecord r1 = run_training(c, tc, task), r2 = run_training(c, tc, task);
    const bool same = metric_fields(r1) == metric_fields(r2) && r1.loss_trace == r2.loss_trace;
    identical += same;
    o.require(same, to_string(f) + " rerun differs");
  }
  o.detail = "5 seeds: shared embeddings and epoch-0 order; " + std::to_string(identical) +
             "/2 reruns identical" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 5

Outcome positional_sanity() {
  Outcome o;
  TaskSpec spec;
  spec.kind = "marker";
  spec.n = 2500;
  spec.length = 128;
  ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 32;
  mc.n_layers = 2;
  const Task task = make_task(spec, mc.vocab_size, mc.max_length, mc.n_classes);
  o.require(task.train.size() == 2000 && task.test.size() == 500, "split sizes");
  TrainConfig tc;
  tc.epochs = 10;

  mc.pe_family = PeKind::Sinusoidal;
  const RunRecord with_pe = run_training(mc, tc, task);
  mc.pe_family = PeKind::None;
  const RunRecord without = run_training(mc, tc, task);

  o.require(with_pe.status == "ok" && with_pe.test_accuracy >= kMarkerAccuracyFloor,
            "sinusoidal+add acc " + fmt("%.3f", with_pe.test_accuracy));
  o.require(without.status == "ok" && without.test_accuracy <= kAblationCeiling,
            "none+add acc " + fmt("%.3f", without.test_accuracy));
  o.require(with_pe.train_seconds <= kRunBudgetSeconds,
            "sinusoidal run took " + fmt("%.0f", with_pe.train_seconds) + "s");
  o.require(without.train_seconds <= kRunBudgetSeconds,
            "none run took " + fmt("%.0f", without.train_seconds) + "s");
  o.detail = "sinusoidal+add " + fmt("%.3f", with_pe.test_accuracy) + " (" +
             fmt("%.0f", with_pe.train_seconds) + "s), none+add " +
             fmt("%.3f", without.test_accuracy) + " (" + fmt("%.0f", without.train_seconds) +
             "s)" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 6

Outcome protocol_shape(const fs::path& workdir) {
  Outcome o;
  const fs::path out = workdir / "grid";
  fs::remove_all(out);
  GridSpec g;
  g.task.n = 1000;
  g.task.length = 32;
  g.train.epochs = 3;
  g.fusions = {FusionKind::Add, FusionKind::GateScalar};
  g.seeds = {0, 1, 2, 3, 4};
  g.out_dir = out;
  run_grid(g);
  const auto res = report(out, FusionKind::Add);

  const std::size_t runs = count_lines(out / "runs.csv") - 1;
  const std::size_t deltas = count_lines(out / "deltas.csv") - 1;
  o.require(runs == 10, std::to_string(runs) + " rows in runs.csv");
  o.require(deltas == 5, std::to_string(deltas) + " rows in deltas.csv");
  o.require(res.summary.size() == 2, std::to_string(res.summary.size()) + " summary rows");
  for (const auto& r : res.summary)
    o.require(r.n == 5 && r.std_accuracy.has_value(), to_string(r.fusion) + " lacks mean +/- std");

  std::size_t delta_plots = 0;
  const std::regex bar("class=\"bar\"");
  for (const auto& p : res.plots) {
    if (p.filename().string().rfind("deltas_", 0) != 0) continue;
    ++delta_plots;
    const std::string doc = slurp(p);
    const auto bars = std::distance(std::sregex_iterator(doc.begin(), doc.end(), bar),
                                    std::sregex_iterator());
    o.require(bars == 5, p.filename().string() + " has " + std::to_string(bars) + " bars");
    o.require(doc.find("class=\"zero\"") != std::string::npos, "no zero line in delta plot");
  }
  o.require(delta_plots == 1, std::to_string(delta_plots) + " paired-delta plots");

  // Regenerate from the CSV alone, twice, in a fresh directory.
  std::vector<std::pair<fs::path, std::string>> first;
  for (const auto& f : {fs::path("summary.csv"), fs::path("deltas.csv")})
    first.emplace_back(f, slurp(out / f));
  for (const auto& p : res.plots) first.emplace_back(p.filename(), slurp(p));
  const fs::path copy = workdir / "grid_copy";
  fs::remove_all(copy);
  fs::create_directories(copy);
  fs::copy_file(out / "runs.csv", copy / "runs.csv");
  report(copy, FusionKind::Add);
  report(out, FusionKind::Add);
  std::size_t mismatched = 0;
  for (const auto& [f, text] : first)
    mismatched += slurp(copy / f) != text || slurp(out / f) != text;
  o.require(mismatched == 0, std::to_string(mismatched) + " report files not byte-identical");
  o.detail = std::to_string(runs) + " runs, " + std::to_string(deltas) + " paired deltas, " +
             std::to_string(res.summary.size()) + " summary rows, " +
             std::to_string(res.plots.size()) + " SVGs, report byte-deterministic: " +
             (mismatched ? "no" : "yes") + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------- 7

Outcome latency_ordering() {
  Outcome o;
  ModelConfig mc;
  const std::size_t add_ops = fusion_ops_per_token(FusionKind::Add, mc.d_model, mc.gate_cnn_k);
  const std::size_t gs_ops =
      fusion_ops_per_token(FusionKind::GateScalar, mc.d_model, mc.gate_cnn_k);
  o.require(add_ops < gs_ops, "op count add " + std::to_string(add_ops) + " >= gate_scalar " +
                                  std::to_string(gs_ops));
  std::string timings;
  for (FusionKind f : kAllFusionKinds) {
    mc.fusion = f;
    const auto r = latency_bench(mc, kLatencyLength, 3, 10, 0);
    const auto& s = r.stats;
    const bool ok = s.trials == 10 && std::isfinite(s.mean_ms) && std::isfinite(s.median_ms) &&
                    std::isfinite(s.std_ms) && s.mean_ms > 0.0 && s.median_ms > 0.0;
    o.require(ok, to_string(f) + " timing not positive and finite");
    timings += (timings.empty() ? "" : ", ") + to_string(f) + " " + fmt("%.2f", s.mean_ms) + "ms";
  }
  o.detail = "ops/token add " + std::to_string(add_ops) + " < gate_scalar " +
             std::to_string(gs_ops) + "; L=512 mean " + timings +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance_out";
  app.add_option("--workdir", workdir, "scratch directory for grid outputs");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"AC1 gradient suite", gradient_suite},
      {"AC2 algebraic identities", algebraic_identities},
      {"AC3 parameter counts", parameter_counts},
      {"AC4 paired-seed fidelity", paired_seed_fidelity},
      {"AC5 positional-information sanity", positional_sanity},
      {"AC6 protocol reproduction in shape", [&] { return protocol_shape(workdir); }},
      {"AC7 latency ordering", latency_ordering},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures ? 1 : 0;
}
