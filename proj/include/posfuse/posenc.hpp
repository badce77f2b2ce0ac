#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace posfuse {

enum class PeKind { Sinusoidal, LearnedAbsolute, Rope, Relative, None };

inline constexpr PeKind kAllPeKinds[] = {PeKind::Sinusoidal, PeKind::LearnedAbsolute,
                                         PeKind::Rope, PeKind::Relative, PeKind::None};

inline std::string to_string(PeKind k) {
  switch (k) {
    case PeKind::Sinusoidal: return "sinusoidal";
    case PeKind::LearnedAbsolute: return "learned_absolute";
    case PeKind::Rope: return "rope";
    case PeKind::Relative: return "relative";
    case PeKind::None: return "none";
  }
  return "?";
}

inline PeKind parse_pe_kind(std::string_view s) {
  for (PeKind k : kAllPeKinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown pe_family '" + std::string(s) +
                    "' (expected sinusoidal, learned_absolute, rope, relative or none)");
}

inline constexpr double kLearnedPeInitStd = 0.02;
inline constexpr int kDefaultRelativeWindow = 32;

namespace detail {
inline void require_even(std::string_view what, std::size_t d) {
  if (d == 0 || d % 2 != 0) {
    throw ConfigError(std::string(what) + ": model dimension must be even, got " +
                      std::to_string(d));
  }
}
inline double rotary_frequency(std::size_t pair, std::size_t d) {
  return std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(d));
}
}  // namespace detail

// P[i, 2j] = sin(i * w_j), P[i, 2j+1] = cos(i * w_j), w_j = 10000^(-2j/d).
inline Tensor sinusoidal_table(std::size_t L, std::size_t d) {
  detail::require_even("sinusoidal_table", d);
  Tensor p({L, d});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double a = static_cast<double>(i) * detail::rotary_frequency(j, d);
      p(i, 2 * j) = std::sin(a);
      p(i, 2 * j + 1) = std::cos(a);
    }
  }
  return p;
}

// Rotary rotation of the all-ones vector: each feature pair at position i is
// (1, 1) rotated by angle i * w_j.
inline Tensor rope_table(std::size_t L, std::size_t d) {
  detail::require_even("rope_table", d);
  Tensor p({L, d});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double a = static_cast<double>(i) * detail::rotary_frequency(j, d);
      const double c = std::cos(a), s = std::sin(a);
      p(i, 2 * j) = c - s;
      p(i, 2 * j + 1) = s + c;
    }
  }
  return p;
}

inline Parameter learned_absolute_table(std::size_t L_max, std::size_t d, Rng& rng) {
  return Parameter{"pe.table", normal_tensor({L_max, d}, rng, 0.0, kLearnedPeInitStd), {}};
}

// Row of the relative table read as the input-level encoding of position i.
inline std::size_t relative_input_row(std::size_t i, int k_rel) {
  return std::min<std::size_t>(i, static_cast<std::size_t>(k_rel)) +
         static_cast<std::size_t>(k_rel);
}

// Row of the relative table for query i attending to key j.
inline std::size_t relative_offset_row(std::size_t i, std::size_t j, int k_rel) {
  const long off = static_cast<long>(j) - static_cast<long>(i);
  return static_cast<std::size_t>(std::clamp<long>(off, -k_rel, k_rel) + k_rel);
}

// Owns the positional tables of one run and materializes P (and, for the
// relative family, the attention-logit bias) on a tape.
class PositionalEncoding {
 public:
  PositionalEncoding(PeKind kind, std::size_t L_max, std::size_t d, int k_rel, Rng& rng)
      : kind_(kind), L_max_(L_max), d_(d), k_rel_(k_rel) {
    switch (kind) {
      case PeKind::Sinusoidal:
        fixed_ = sinusoidal_table(L_max, d);
        break;
      case PeKind::Rope:
        fixed_ = rope_table(L_max, d);
        break;
      case PeKind::LearnedAbsolute:
        params_.push_back(learned_absolute_table(L_max, d, rng));
        break;
      case PeKind::Relative: {
        if (k_rel < 1) throw ConfigError("relative encoding: K_rel must be >= 1");
        const auto rows = 2 * static_cast<std::size_t>(k_rel) + 1;
        params_.push_back(
            Parameter{"pe.rel_table", normal_tensor({rows, d}, rng, 0.0, kLearnedPeInitStd), {}});
        params_.push_back(
            Parameter{"pe.rel_v", normal_tensor({d}, rng, 0.0, kLearnedPeInitStd), {}});
        break;
      }
      case PeKind::None:
        break;
    }
  }

  PeKind kind() const { return kind_; }
  std::size_t max_length() const { return L_max_; }
  int relative_window() const { return k_rel_; }

  // P rows for the given within-sequence positions, packed [N x d].
  Var encode(Tape& t, const std::vector<std::size_t>& positions) {
    for (std::size_t p : positions) {
      if (p >= L_max_) {
        throw LengthError("position " + std::to_string(p) + " exceeds L_max " +
                          std::to_string(L_max_));
      }
    }
    switch (kind_) {
      case PeKind::Sinusoidal:
      case PeKind::Rope: {
        Tensor out({positions.size(), d_});
        for (std::size_t r = 0; r < positions.size(); ++r)
          std::copy_n(fixed_.row(positions[r]).data(), d_, out.row(r).data());
        return t.constant(std::move(out));
      }
      case PeKind::LearnedAbsolute:
        return gather_rows(t.leaf(params_[0]), positions);
      case PeKind::Relative: {
        std::vector<std::size_t> rows(positions.size());
        for (std::size_t r = 0; r < positions.size(); ++r)
          rows[r] = relative_input_row(positions[r], k_rel_);
        return gather_rows(t.leaf(params_[0]), std::move(rows));
      }
      case PeKind::None:
        break;
    }
    return t.constant(Tensor({positions.size(), d_}));
  }

  // P for one sequence of length L.
  Var encode(Tape& t, std::size_t L) {
    std::vector<std::size_t> pos(L);
    for (std::size_t i = 0; i < L; ++i) pos[i] = i;
    return encode(t, pos);
  }

  // [L x L] additive logit bias, bias[i, j] = v . R[clip(j - i) + K_rel].
  // Absent for every family except Relative.
  std::optional<Var> attention_bias(Tape& t, std::size_t L) {
    if (kind_ != PeKind::Relative) return std::nullopt;
    Var table = t.leaf(params_[0]);
    Var v = reshape(t.leaf(params_[1]), {d_, 1});
    Var scores = matmul(table, v);
    std::vector<std::size_t> idx(L * L);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) idx[i * L + j] = relative_offset_row(i, j, k_rel_);
    return reshape(gather_rows(scores, std::move(idx)), {L, L});
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
  PeKind kind_;
  std::size_t L_max_;
  std::size_t d_;
  int k_rel_;
  Tensor fixed_;
  std::vector<Parameter> params_;
};

inline std::size_t pe_param_count(PeKind kind, std::size_t L_max, std::size_t d, int k_rel) {
  switch (kind) {
    case PeKind::LearnedAbsolute: return L_max * d;
    case PeKind::Relative: return (2 * static_cast<std::size_t>(k_rel) + 1) * d + d;
    default: return 0;
  }
}

}  // namespace posfuse
