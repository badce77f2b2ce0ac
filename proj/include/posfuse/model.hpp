#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "batch.hpp"
#include "config.hpp"
#include "fusion.hpp"
#include "posenc.hpp"
#include "rng.hpp"

namespace posfuse {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t max_length = 512;
  std::size_t n_classes = 2;
  PeKind pe_family = PeKind::Sinusoidal;
  FusionKind fusion = FusionKind::Add;
  int gate_cnn_k = kDefaultGateCnnHalfWindow;
  int relative_window = kDefaultRelativeWindow;
  double dropout = 0.1;

  void validate() const {
    if (!vocab_size || !d_model || !n_heads || !n_layers || !d_ff || !max_length || !n_classes)
      throw ConfigError("model dimensions must all be positive");
    if (d_model % 2 != 0) throw ConfigError("d_model must be even");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (vocab_size < 3) throw ConfigError("vocab_size must be at least 3");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (gate_cnn_k < 0) throw ParameterError("gate_cnn_k must be >= 0");
    if (relative_window < 1) throw ConfigError("relative_window must be >= 1");
  }

  static ModelConfig from_key_values(const KeyValues& kv) {
    ModelConfig c;
    ConfigReader r(kv);
    r.read("vocab_size", c.vocab_size);
    r.read("d_model", c.d_model);
    r.read("n_heads", c.n_heads);
    r.read("n_layers", c.n_layers);
    r.read("d_ff", c.d_ff);
    r.read("max_length", c.max_length);
    r.read("n_classes", c.n_classes);
    r.read("gate_cnn_k", c.gate_cnn_k);
    r.read("relative_window", c.relative_window);
    r.read("dropout", c.dropout);
    std::string s;
    r.read("pe_family", s);
    if (!s.empty()) c.pe_family = parse_pe_kind(s);
    s.clear();
    r.read("fusion", s);
    if (!s.empty()) c.fusion = parse_fusion_kind(s);
    c.validate();
    return c;
  }

  KeyValues to_key_values() const {
    return {{"vocab_size", format_number(vocab_size)},
            {"d_model", format_number(d_model)},
            {"n_heads", format_number(n_heads)},
            {"n_layers", format_number(n_layers)},
            {"d_ff", format_number(d_ff)},
            {"max_length", format_number(max_length)},
            {"n_classes", format_number(n_classes)},
            {"pe_family", to_string(pe_family)},
            {"fusion", to_string(fusion)},
            {"gate_cnn_k", format_number(gate_cnn_k)},
            {"relative_window", format_number(relative_window)},
            {"dropout", format_number(dropout)}};
  }

  bool operator==(const ModelConfig&) const = default;
};

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product multi-head attention over packed sequences. Rows
// [offsets[b], offsets[b+1]) of x form sequence b; queries only see keys of
// their own sequence, so padding never enters the computation. `bias(L)`
// may supply an [L x L] logit bias shared by every head.
inline Var multi_head_attention(
    Tape& t, Var x, const std::vector<std::size_t>& offsets, const AttentionWeights& w,
    std::size_t n_heads,
    const std::function<std::optional<Var>(std::size_t)>& bias = nullptr,
    std::vector<Var>* attention_out = nullptr) {
  const std::size_t N = x.value().rows(), d = x.value().cols();
  if (d % n_heads != 0) throw DimensionError("attention: d not divisible by heads");
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = linear(x, w.wq, w.bq);
  Var k = linear(x, w.wk, w.bk);
  Var v = linear(x, w.wv, w.bv);
  std::vector<Block> blocks;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t off = offsets[s], len = offsets[s + 1] - offsets[s];
    std::optional<Var> b = bias ? bias(len) : std::nullopt;
    for (std::size_t h = 0; h < n_heads; ++h) {
      Var qs = slice(q, off, len, h * dh, dh);
      Var ks = slice(k, off, len, h * dh, dh);
      Var vs = slice(v, off, len, h * dh, dh);
      Var scores = scale(matmul_nt(qs, ks), inv_sqrt);
      if (b) scores = add(scores, *b);
      Var attn = softmax_lastdim(scores);
      if (attention_out) attention_out->push_back(attn);
      blocks.push_back({matmul(attn, vs), off, h * dh});
    }
  }
  return linear(place_blocks(t, N, d, blocks), w.wo, w.bo);
}

struct ForwardOptions {
  bool train = false;
  Rng* dropout_rng = nullptr;
};

struct ParamCounts {
  std::size_t total = 0;
  std::size_t fusion_only = 0;
};

// Encoder-only classifier: embed -> fuse with P -> pre-norm blocks ->
// final norm -> masked mean pool -> linear head.
class Model {
 public:
  // Initial values are drawn from one generator in a fixed order: token
  // embeddings, encoder blocks, head, positional tables, fusion. Fusion is
  // last so that every shared weight is identical across fusion variants.
  Model(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_((cfg.validate(), cfg)),
        rng_(make_rng(seed, Stream::Init)),
        embed_{"embed.tok", normal_tensor({cfg.vocab_size, cfg.d_model}, rng_, 0.0, 1.0), {}},
        layers_(make_layers()),
        head_(make_head()),
        pe_(cfg.pe_family, cfg.max_length, cfg.d_model, cfg.relative_window, rng_),
        fusion_(cfg.fusion, cfg.d_model, cfg.gate_cnn_k, rng_) {}

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  PositionalEncoding& positional() { return pe_; }
  FusionOp& fusion() { return fusion_; }

  // Every parameter in a fixed order: embedding, layers, head, PE, fusion.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embed_};
    for (auto& layer : layers_)
      for (auto& p : layer) out.push_back(&p);
    for (auto& p : head_) out.push_back(&p);
    for (auto* p : pe_.parameters()) out.push_back(p);
    for (auto* p : fusion_.parameters()) out.push_back(p);
    return out;
  }

  Parameter* find(const std::string& name) {
    for (auto* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

  ParamCounts count_params() {
    ParamCounts c;
    for (auto* p : parameters()) c.total += p->value.size();
    c.fusion_only = fusion_.param_count();
    return c;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  // Fused encoder input H for the valid positions of a batch, packed.
  struct Encoded {
    Var h;
    std::optional<Var> gate;
    std::vector<std::size_t> offsets;
  };

  Encoded embed_and_fuse(Tape& t, const Batch& batch) {
    std::vector<std::size_t> offsets{0};
    std::vector<std::size_t> ids, positions;
    for (std::size_t b = 0; b < batch.size; ++b) {
      const std::size_t len = batch.lengths[b];
      if (len == 0) throw DataError("empty sequence in batch");
      if (len > cfg_.max_length) {
        throw LengthError("sequence length " + std::to_string(len) + " exceeds max_length " +
                          std::to_string(cfg_.max_length));
      }
      for (std::size_t i = 0; i < len; ++i) {
        const int tok = batch.token(b, i);
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab_size) {
          throw DataError("token id " + std::to_string(tok) + " outside vocabulary of size " +
                          std::to_string(cfg_.vocab_size));
        }
        ids.push_back(static_cast<std::size_t>(tok));
        positions.push_back(i);
      }
      offsets.push_back(offsets.back() + len);
    }
    Var e = gather_rows(t.leaf(embed_), std::move(ids));
    Var p = pe_.encode(t, positions);
    auto fused = fusion_.apply(t, e, p, offsets);
    return {fused.h, fused.gate, std::move(offsets)};
  }

  // Logits [batch x n_classes].
  Var forward(Tape& t, const Batch& batch, ForwardOptions opt = {}) {
    const bool drop = opt.train && cfg_.dropout > 0.0;
    if (drop && !opt.dropout_rng) throw ContractError("training forward needs a dropout rng");
    auto maybe_drop = [&](Var v) { return drop ? dropout(v, cfg_.dropout, *opt.dropout_rng) : v; };

    auto enc = embed_and_fuse(t, batch);
    const auto& offsets = enc.offsets;
    Var x = maybe_drop(enc.h);

    std::map<std::size_t, std::optional<Var>> bias_cache;
    auto bias = [&](std::size_t L) -> std::optional<Var> {
      auto it = bias_cache.find(L);
      if (it == bias_cache.end()) it = bias_cache.emplace(L, pe_.attention_bias(t, L)).first;
      return it->second;
    };

    for (auto& layer : layers_) {
      auto P = [&](LayerSlot s) { return t.leaf(layer[static_cast<std::size_t>(s)]); };
      Var a = layer_norm(x, P(LayerSlot::Ln1Gamma), P(LayerSlot::Ln1Beta));
      a = multi_head_attention(t, a, offsets,
                               {P(LayerSlot::Wq), P(LayerSlot::Bq), P(LayerSlot::Wk),
                                P(LayerSlot::Bk), P(LayerSlot::Wv), P(LayerSlot::Bv),
                                P(LayerSlot::Wo), P(LayerSlot::Bo)},
                               cfg_.n_heads, bias);
      x = add(x, maybe_drop(a));
      Var f = layer_norm(x, P(LayerSlot::Ln2Gamma), P(LayerSlot::Ln2Beta));
      f = linear(relu(linear(f, P(LayerSlot::W1), P(LayerSlot::B1))), P(LayerSlot::W2),
                 P(LayerSlot::B2));
      x = add(x, maybe_drop(f));
    }
    x = layer_norm(x, t.leaf(head_[0]), t.leaf(head_[1]));
    Var pooled = mean_pool_segments(x, offsets);
    return linear(pooled, t.leaf(head_[2]), t.leaf(head_[3]));
  }

  Var loss(Tape& t, const Batch& batch, ForwardOptions opt = {}) {
    std::vector<std::size_t> labels(batch.labels.begin(), batch.labels.end());
    for (int l : batch.labels) {
      if (l < 0) throw DataError("negative label");
    }
    return cross_entropy(forward(t, batch, opt), labels);
  }

 private:
  enum class LayerSlot : std::size_t {
    Ln1Gamma, Ln1Beta, Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo, Ln2Gamma, Ln2Beta, W1, B1, W2, B2, Count
  };

  Tensor xavier(std::size_t fan_in, std::size_t fan_out) {
    return normal_tensor({fan_in, fan_out}, rng_, 0.0,
                         std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  }

  std::vector<std::vector<Parameter>> make_layers() {
    const std::size_t d = cfg_.d_model, ff = cfg_.d_ff;
    std::vector<std::vector<Parameter>> layers;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      std::vector<Parameter> ps;
      ps.push_back({pre + "ln1.gamma", Tensor({d}, 1.0), {}});
      ps.push_back({pre + "ln1.beta", Tensor({d}), {}});
      for (const char* n : {"q", "k", "v", "o"}) {
        ps.push_back({pre + "attn.w" + n, xavier(d, d), {}});
        ps.push_back({pre + "attn.b" + n, Tensor({d}), {}});
      }
      ps.push_back({pre + "ln2.gamma", Tensor({d}, 1.0), {}});
      ps.push_back({pre + "ln2.beta", Tensor({d}), {}});
      ps.push_back({pre + "ffn.w1", xavier(d, ff), {}});
      ps.push_back({pre + "ffn.b1", Tensor({ff}), {}});
      ps.push_back({pre + "ffn.w2", xavier(ff, d), {}});
      ps.push_back({pre + "ffn.b2", Tensor({d}), {}});
      layers.push_back(std::move(ps));
    }
    return layers;
  }

  std::vector<Parameter> make_head() {
    const std::size_t d = cfg_.d_model;
    std::vector<Parameter> ps;
    ps.push_back({"final_ln.gamma", Tensor({d}, 1.0), {}});
    ps.push_back({"final_ln.beta", Tensor({d}), {}});
    ps.push_back({"head.w", xavier(d, cfg_.n_classes), {}});
    ps.push_back({"head.b", Tensor({cfg_.n_classes}), {}});
    return ps;
  }

  ModelConfig cfg_;
  Rng rng_;
  Parameter embed_;
  std::vector<std::vector<Parameter>> layers_;
  std::vector<Parameter> head_;
  PositionalEncoding pe_;
  FusionOp fusion_;
};

}  // namespace posfuse
