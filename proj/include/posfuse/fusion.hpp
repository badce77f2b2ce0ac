#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace posfuse {

// How token embeddings E and positional encodings P are combined into the
// encoder input H. All operators map [L x d] x [L x d] -> [L x d].
enum class FusionKind { Add, Concat, GateScalar, GateCnn, GateMlp };

inline constexpr FusionKind kAllFusionKinds[] = {FusionKind::Add, FusionKind::Concat,
                                                 FusionKind::GateScalar, FusionKind::GateCnn,
                                                 FusionKind::GateMlp};

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::Add: return "add";
    case FusionKind::Concat: return "concat";
    case FusionKind::GateScalar: return "gate_scalar";
    case FusionKind::GateCnn: return "gate_cnn";
    case FusionKind::GateMlp: return "gate_mlp";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(std::string_view s) {
  for (FusionKind k : kAllFusionKinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown fusion '" + std::string(s) +
                    "' (expected add, concat, gate_scalar, gate_cnn or gate_mlp)");
}

inline constexpr int kDefaultGateCnnHalfWindow = 3;
inline constexpr double kConcatInitNoise = 0.01;

// Learnable parameter count of one fusion operator. GateMlp uses hidden
// width d.
inline std::size_t fusion_param_count(FusionKind kind, std::size_t d, int half_window = 0) {
  switch (kind) {
    case FusionKind::Add: return 0;
    case FusionKind::Concat: return 2 * d * d;
    case FusionKind::GateScalar: return 2 * d + 1;
    case FusionKind::GateCnn: return d * (2 * static_cast<std::size_t>(half_window) + 1);
    case FusionKind::GateMlp: return (2 * d * d + d) + (d * d + d);
  }
  return 0;
}

// Arithmetic operations per token spent in the fusion stage, counting a
// multiply-accumulate as one operation and a sigmoid as one.
//   add:         d additions
//   concat:      2d^2 MACs for W [E;P]
//   gate_scalar: 2d MACs (dot) + 3 (bias, sigmoid, 1-g) + 3d (two scales, one add)
//   gate_cnn:    (2K+1)d MACs + 2 (sigmoid, 1-g) + 3d
//   gate_mlp:    2d^2 + d (layer 1 + bias) + d (relu) + d^2 + d (layer 2 + bias)
//                + d (sigmoid) + d (1-g) + 3d
inline std::size_t fusion_ops_per_token(FusionKind kind, std::size_t d, int half_window = 0) {
  const std::size_t taps = 2 * static_cast<std::size_t>(std::max(half_window, 0)) + 1;
  switch (kind) {
    case FusionKind::Add: return d;
    case FusionKind::Concat: return 2 * d * d;
    case FusionKind::GateScalar: return 2 * d + 3 + 3 * d;
    case FusionKind::GateCnn: return taps * d + 2 + 3 * d;
    case FusionKind::GateMlp: return 3 * d * d + 7 * d;
  }
  return 0;
}

// ------------------------------------------------------------ operator kernels

inline Var fuse_add(Var e, Var p) { return add(e, p); }

// H_i = W [E_i; P_i], W is [d x 2d], no bias.
inline Var fuse_concat(Var e, Var p, Var w) {
  const std::size_t d = e.value().cols();
  if (w.value().rank() != 2 || w.value().shape()[0] != d || w.value().shape()[1] != 2 * d) {
    throw DimensionError("fuse_concat: W must be [" + std::to_string(d) + "x" +
                         std::to_string(2 * d) + "], got " + to_string(w.value()));
  }
  detail::require_same_shape("fuse_concat", e.value(), p.value());
  return matmul_nt(concat_lastdim(e, p), w);
}

struct GatedFusion {
  Var h;
  Var gate;  // [L x 1] for scalar gates, [L x d] for gate_mlp
};

// g_i = sigmoid(w . [E_i; P_i] + b); H_i = g_i E_i + (1 - g_i) P_i
inline GatedFusion fuse_gate_scalar(Var e, Var p, Var w, Var b) {
  detail::require_same_shape("fuse_gate_scalar", e.value(), p.value());
  const std::size_t d = e.value().cols();
  if (w.value().size() != 2 * d || b.value().size() != 1) {
    throw DimensionError("fuse_gate_scalar: expected w of size " + std::to_string(2 * d) +
                         " and scalar b");
  }
  Var logits = add_rowvec(matmul(concat_lastdim(e, p), reshape(w, {2 * d, 1})), b);
  Var g = sigmoid(logits);
  return {convex_mix(g, e, p), g};
}

// g_i = sigmoid(sum_c sum_k kernels[k+K, c] P[i+k, c]); the gate reads P only.
// `offsets` delimits packed sequences; an empty list means one sequence.
inline GatedFusion fuse_gate_cnn(Var e, Var p, Var kernels, int half_window,
                                 std::vector<std::size_t> offsets = {}) {
  detail::require_same_shape("fuse_gate_cnn", e.value(), p.value());
  Var conv = depthwise_conv1d(p, kernels, half_window, std::move(offsets));
  Var g = sigmoid(sum_lastdim(conv));
  return {convex_mix(g, e, p), g};
}

struct GateMlpWeights {
  Var w1;  // [d_h x 2d]
  Var b1;  // [d_h]
  Var w2;  // [d x d_h]
  Var b2;  // [d]
};

// g_i = sigmoid(W2 relu(W1 [E_i; P_i] + b1) + b2), one gate per feature.
inline GatedFusion fuse_gate_mlp(Var e, Var p, const GateMlpWeights& m) {
  detail::require_same_shape("fuse_gate_mlp", e.value(), p.value());
  Var hidden = relu(add_rowvec(matmul_nt(concat_lastdim(e, p), m.w1), m.b1));
  Var g = sigmoid(add_rowvec(matmul_nt(hidden, m.w2), m.b2));
  if (g.value().shape() != e.value().shape()) {
    throw DimensionError("fuse_gate_mlp: gate shape " + to_string(g.value()) +
                         " does not match " + to_string(e.value()));
  }
  return {convex_mix(g, e, p), g};
}

// ------------------------------------------------------------ owning operator

struct FusionOutput {
  Var h;
  std::optional<Var> gate;
};

class FusionOp {
 public:
  // Draws its initial values from `rng`. Gate weights start at zero so every
  // gate opens at 0.5; Concat starts at [I | I] plus small noise.
  FusionOp(FusionKind kind, std::size_t d, int half_window, Rng& rng)
      : kind_(kind), d_(d), half_window_(half_window) {
    switch (kind) {
      case FusionKind::Add:
        break;
      case FusionKind::Concat: {
        Tensor w = normal_tensor({d, 2 * d}, rng, 0.0, kConcatInitNoise);
        for (std::size_t i = 0; i < d; ++i) {
          w(i, i) += 1.0;
          w(i, d + i) += 1.0;
        }
        params_.push_back({"fusion.concat.w", std::move(w), {}});
        break;
      }
      case FusionKind::GateScalar:
        params_.push_back({"fusion.gate.w", Tensor({2 * d}), {}});
        params_.push_back({"fusion.gate.b", Tensor::scalar(0.0), {}});
        break;
      case FusionKind::GateCnn:
        if (half_window < 0) {
          throw ParameterError("gate_cnn: half window K must be >= 0, got " +
                               std::to_string(half_window));
        }
        params_.push_back(
            {"fusion.cnn.kernels",
             Tensor({2 * static_cast<std::size_t>(half_window) + 1, d}), {}});
        break;
      case FusionKind::GateMlp: {
        const std::size_t hidden = d;
        params_.push_back({"fusion.mlp.w1",
                           normal_tensor({hidden, 2 * d}, rng, 0.0,
                                         1.0 / std::sqrt(static_cast<double>(2 * d))),
                           {}});
        params_.push_back({"fusion.mlp.b1", Tensor({hidden}), {}});
        params_.push_back({"fusion.mlp.w2", Tensor({d, hidden}), {}});
        params_.push_back({"fusion.mlp.b2", Tensor({d}), {}});
        break;
      }
    }
  }

  FusionKind kind() const { return kind_; }
  int half_window() const { return half_window_; }

  FusionOutput apply(Tape& t, Var e, Var p, const std::vector<std::size_t>& offsets = {}) {
    switch (kind_) {
      case FusionKind::Add:
        return {fuse_add(e, p), std::nullopt};
      case FusionKind::Concat:
        return {fuse_concat(e, p, t.leaf(params_[0])), std::nullopt};
      case FusionKind::GateScalar: {
        auto r = fuse_gate_scalar(e, p, t.leaf(params_[0]), t.leaf(params_[1]));
        return {r.h, r.gate};
      }
      case FusionKind::GateCnn: {
        auto r = fuse_gate_cnn(e, p, t.leaf(params_[0]), half_window_, offsets);
        return {r.h, r.gate};
      }
      case FusionKind::GateMlp: {
        auto r = fuse_gate_mlp(e, p,
                               {t.leaf(params_[0]), t.leaf(params_[1]), t.leaf(params_[2]),
                                t.leaf(params_[3])});
        return {r.h, r.gate};
      }
    }
    throw ContractError("unreachable fusion kind");
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  FusionKind kind_;
  std::size_t d_;
  int half_window_;
  std::vector<Parameter> params_;
};

}  // namespace posfuse
