#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "batch.hpp"
#include "fusion.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace posfuse {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

// Below this norm a gradient counts as zero; central differences of an O(1)
// loss carry roundoff near 1e-11 per element at h = 1e-5.
inline constexpr double kGradCheckZeroNorm = 1e-8;

// ||a - n|| / max(||a||, ||n||); zero when both gradients vanish.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    diff += (a - n) * (a - n);
    na += a * a;
    nn += n * n;
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  if (denom < kGradCheckZeroNorm) return 0.0;
  return std::sqrt(diff) / denom;
}

struct GradCheckEntry {
  std::string name;
  double error = 0.0;
};

struct GradCheckReport {
  std::string label;
  std::vector<GradCheckEntry> entries;

  double max_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.error);
    return m;
  }
};

// Compares reverse-mode gradients of a scalar function of `params` with
// central differences of step h.
inline GradCheckReport check_gradients(const std::string& label,
                                       const std::vector<Parameter*>& params,
                                       const std::function<Var(Tape&)>& loss_fn,
                                       double h = kGradCheckStep) {
  for (auto* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(loss_fn(t));
  }
  auto eval = [&] {
    Tape t;
    return loss_fn(t).value().item();
  };
  GradCheckReport report{label, {}};
  for (auto* p : params) {
    Tensor numeric(p->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = eval();
      p->value[i] = orig - h;
      const double down = eval();
      p->value[i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    report.entries.push_back({p->name, relative_error(p->grad, numeric)});
  }
  return report;
}

// Loss = sum(f(inputs) * R) for a fixed random R, so every output element
// carries a distinct upstream gradient.
inline GradCheckReport check_op(const std::string& label, std::vector<Parameter>& inputs,
                                const std::function<Var(Tape&, std::vector<Var>&)>& f,
                                Rng& rng) {
  Tensor weights;
  auto loss_fn = [&](Tape& t) {
    std::vector<Var> vars;
    for (auto& p : inputs) vars.push_back(t.leaf(p));
    Var out = f(t, vars);
    if (weights.empty()) weights = normal_tensor(out.value().shape(), rng, 0.0, 1.0);
    return sum_all(mul(out, t.constant(weights)));
  };
  std::vector<Parameter*> ptrs;
  for (auto& p : inputs) ptrs.push_back(&p);
  return check_gradients(label, ptrs, loss_fn);
}

struct GradCheckSetup {
  std::size_t d_model = 8;
  std::size_t length = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t vocab_size = 12;
  std::uint64_t seed = 7;
};

// Random batch of three sequences, the longest of length setup.length.
inline Batch gradcheck_batch(const GradCheckSetup& s, Rng& rng) {
  std::uniform_int_distribution<int> tok(1, static_cast<int>(s.vocab_size) - 1);
  std::vector<Example> ex;
  for (std::size_t len : {s.length, s.length * 2 / 3, std::max<std::size_t>(1, s.length / 4)}) {
    Example e;
    e.tokens.resize(len);
    for (int& v : e.tokens) v = tok(rng);
    e.label = static_cast<int>(ex.size() % 2);
    ex.push_back(std::move(e));
  }
  return make_batch(ex);
}

// Full-model check for one (PE family, fusion) pair. Fusion and PE
// parameters are moved off their neutral init so gates are exercised.
inline GradCheckReport check_model(PeKind pe, FusionKind fusion, const GradCheckSetup& s = {}) {
  ModelConfig cfg;
  cfg.vocab_size = s.vocab_size;
  cfg.d_model = s.d_model;
  cfg.n_heads = s.n_heads;
  cfg.n_layers = s.n_layers;
  cfg.d_ff = 2 * s.d_model;
  cfg.max_length = s.length;
  cfg.pe_family = pe;
  cfg.fusion = fusion;
  cfg.relative_window = static_cast<int>(s.length / 4);
  cfg.gate_cnn_k = 2;
  cfg.dropout = 0.0;
  Model model(cfg, s.seed);
  Rng rng = make_rng(s.seed, Stream::Misc);
  for (auto* p : model.positional().parameters())
    for (double& v : p->value.values()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  for (auto* p : model.fusion().parameters())
    for (double& v : p->value.values()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  const Batch batch = gradcheck_batch(s, rng);
  return check_gradients("model " + to_string(pe) + "+" + to_string(fusion), model.parameters(),
                         [&](Tape& t) { return model.loss(t, batch); });
}

// Every differentiable operation on small random inputs.
inline std::vector<GradCheckReport> check_all_ops(std::uint64_t seed = 11) {
  Rng rng = make_rng(seed, Stream::Misc);
  auto P = [&](const std::string& name, Shape shape, double stddev = 1.0) {
    return Parameter{name, normal_tensor(std::move(shape), rng, 0.0, stddev), {}};
  };
  std::vector<GradCheckReport> out;
  auto run = [&](const std::string& label, std::vector<Parameter> in,
                 std::function<Var(Tape&, std::vector<Var>&)> f) {
    out.push_back(check_op(label, in, f, rng));
  };
  run("matmul", {P("a", {3, 4}), P("b", {4, 5})}, [](Tape&, auto& v) { return matmul(v[0], v[1]); });
  run("matmul_nt", {P("a", {3, 4}), P("b", {5, 4})},
      [](Tape&, auto& v) { return matmul_nt(v[0], v[1]); });
  run("add_rowvec", {P("x", {3, 4}), P("v", {4})},
      [](Tape&, auto& v) { return add_rowvec(v[0], v[1]); });
  run("mul", {P("a", {3, 4}), P("b", {3, 4})}, [](Tape&, auto& v) { return mul(v[0], v[1]); });
  run("sub", {P("a", {3, 4}), P("b", {3, 4})}, [](Tape&, auto& v) { return sub(v[0], v[1]); });
  run("softmax_lastdim", {P("x", {3, 5})}, [](Tape&, auto& v) { return softmax_lastdim(v[0]); });
  run("layer_norm", {P("x", {4, 6}), P("gamma", {6}), P("beta", {6})},
      [](Tape&, auto& v) { return layer_norm(v[0], v[1], v[2]); });
  run("sigmoid", {P("x", {3, 4}, 2.0)}, [](Tape&, auto& v) { return sigmoid(v[0]); });
  run("tanh", {P("x", {3, 4})}, [](Tape&, auto& v) { return tanh(v[0]); });
  run("relu", {P("x", {3, 4})}, [](Tape&, auto& v) { return relu(v[0]); });
  run("depthwise_conv1d", {P("p", {7, 3}), P("k", {5, 3})},
      [](Tape&, auto& v) { return depthwise_conv1d(v[0], v[1], 2, {0, 4, 7}); });
  run("convex_mix/row", {P("g", {4, 1}), P("a", {4, 3}), P("b", {4, 3})},
      [](Tape&, auto& v) { return convex_mix(sigmoid(v[0]), v[1], v[2]); });
  run("convex_mix/elem", {P("g", {4, 3}), P("a", {4, 3}), P("b", {4, 3})},
      [](Tape&, auto& v) { return convex_mix(sigmoid(v[0]), v[1], v[2]); });
  run("concat_lastdim", {P("a", {3, 2}), P("b", {3, 4})},
      [](Tape&, auto& v) { return concat_lastdim(v[0], v[1]); });
  run("slice", {P("x", {5, 6})}, [](Tape&, auto& v) { return slice(v[0], 1, 3, 2, 3); });
  run("place_blocks", {P("a", {2, 2}), P("b", {3, 1})}, [](Tape& t, auto& v) {
    return place_blocks(t, 4, 3, {{v[0], 0, 0}, {v[1], 1, 2}});
  });
  run("gather_rows", {P("table", {5, 3})},
      [](Tape&, auto& v) { return gather_rows(v[0], {4, 0, 4, 2}); });
  run("sum_lastdim", {P("x", {3, 4})}, [](Tape&, auto& v) { return sum_lastdim(v[0]); });
  run("mean_pool_segments", {P("x", {6, 3})},
      [](Tape&, auto& v) { return mean_pool_segments(v[0], {0, 2, 6}); });
  run("reshape", {P("x", {2, 6})}, [](Tape&, auto& v) { return reshape(v[0], {3, 4}); });
  run("cross_entropy", {P("logits", {4, 3})},
      [](Tape&, auto& v) { return cross_entropy(v[0], {0, 2, 1, 2}); });
  run("fuse_concat", {P("e", {4, 3}), P("p", {4, 3}), P("w", {3, 6})},
      [](Tape&, auto& v) { return fuse_concat(v[0], v[1], v[2]); });
  run("fuse_gate_scalar", {P("e", {4, 3}), P("p", {4, 3}), P("w", {6}), P("b", {})},
      [](Tape&, auto& v) { return fuse_gate_scalar(v[0], v[1], v[2], v[3]).h; });
  run("fuse_gate_cnn", {P("e", {5, 3}), P("p", {5, 3}), P("k", {3, 3})},
      [](Tape&, auto& v) { return fuse_gate_cnn(v[0], v[1], v[2], 1).h; });
  run("fuse_gate_mlp",
      {P("e", {4, 3}), P("p", {4, 3}), P("w1", {3, 6}), P("b1", {3}), P("w2", {3, 3}),
       P("b2", {3})},
      [](Tape&, auto& v) { return fuse_gate_mlp(v[0], v[1], {v[2], v[3], v[4], v[5]}).h; });
  return out;
}

// Operation-level checks followed by the full model for every PE family
// with positional input and every fusion operator.
inline std::vector<GradCheckReport> run_gradcheck_suite(const GradCheckSetup& s = {}) {
  auto out = check_all_ops();
  for (PeKind pe : {PeKind::Sinusoidal, PeKind::LearnedAbsolute, PeKind::Rope, PeKind::Relative})
    for (FusionKind f : kAllFusionKinds) out.push_back(check_model(pe, f, s));
  return out;
}

}  // namespace posfuse
