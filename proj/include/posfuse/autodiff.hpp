#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace posfuse {

// A named learnable tensor. `grad` is empty until a backward pass or
// zero_grad() populates it; when present its shape equals the value's.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode record. Nodes are appended in evaluation order, so every
// node's inputs precede it and backward() is a single reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{"constant", std::move(value), {}, {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  // One leaf per parameter per tape; repeated calls return the same node.
  Var leaf(Parameter& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return {this, it->second};
    nodes_.push_back(Node{"parameter", p.value, {}, {}, {}, &p, true});
    leaves_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs,
             BackwardFn fn) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite value in output " +
                         to_string(value));
    }
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs) fn = nullptr;
    nodes_.push_back(
        Node{op, std::move(value), {}, std::move(inputs), std::move(fn), nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::string_view op(std::size_t id) const { return nodes_[id].op; }

  Tensor& grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 and sweeps backwards, then accumulates leaf
  // gradients into their Parameters. Parameters on the tape that the root
  // does not reach receive a zero gradient.
  void backward(Var root) {
    if (root.tape != this) throw ContractError("backward: root belongs to another tape");
    if (nodes_[root.id].value.size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " +
                          to_string(nodes_[root.id].value));
    }
    grad_mut(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (!n.param) continue;
      if (n.param->grad.empty()) n.param->zero_grad();
      if (n.grad.empty()) continue;
      auto dst = n.param->grad.values();
      const auto src = n.grad.values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param;
    bool requires_grad;
  };

  std::deque<Node> nodes_;  // references to values stay valid as the tape grows
  std::unordered_map<const Parameter*, std::size_t> leaves_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError("operands live on different tapes");
  }
  return *a.tape;
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
  }
}

inline void require_rank2(std::string_view op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(a));
  }
}

inline void axpy(std::span<double> dst, std::span<const double> src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

template <typename F>
Var unary(std::string_view op, Var x, F&& f, std::function<double(double y, double x)> dfdx) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return x.tape->record(op, std::move(out), {x.id}, [dfdx](Tape& t, std::size_t self) {
    const std::size_t xi = t.inputs(self)[0];
    if (!t.requires_grad(xi)) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    const Tensor& xv = t.value(xi);
    Tensor& dx = t.grad_mut(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(y[i], xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::axpy(out.values(), b.value().values());
  return t.record("add", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
    for (std::size_t in : t.inputs(self)) {
      if (t.requires_grad(in)) detail::axpy(t.grad_mut(in).values(), t.grad(self).values());
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  detail::axpy(out.values(), b.value().values(), -1.0);
  return t.record("sub", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
    const auto& in = t.inputs(self);
    if (t.requires_grad(in[0])) detail::axpy(t.grad_mut(in[0]).values(), t.grad(self).values());
    if (t.requires_grad(in[1]))
      detail::axpy(t.grad_mut(in[1]).values(), t.grad(self).values(), -1.0);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record("mul", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const Tensor& g = t.grad(self);
    for (int side = 0; side < 2; ++side) {
      if (!t.requires_grad(in[side])) continue;
      const Tensor& other = t.value(in[1 - side]);
      Tensor& d = t.grad_mut(in[side]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= c;
  return x.tape->record("scale", std::move(out), {x.id}, [c](Tape& t, std::size_t self) {
    const std::size_t xi = t.inputs(self)[0];
    detail::axpy(t.grad_mut(xi).values(), t.grad(self).values(), c);
  });
}

inline double sigmoid_value(double x) {
  // Clamped so that outputs stay strictly inside (0, 1) even where the
  // exact value rounds to 0 or 1.
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  const double hi = std::nextafter(1.0, 0.0);
  double y;
  if (x >= 0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  return std::clamp(y, lo, hi);
}

inline Var sigmoid(Var x) {
  return detail::unary("sigmoid", x, sigmoid_value,
                       [](double y, double) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double y, double) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
  return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double, double xv) { return xv > 0.0 ? 1.0 : 0.0; });
}

// out = gate * a + (1 - gate) * b. `gate` is either [rows x 1] (one scalar per
// row, shared across features) or the same shape as a and b.
inline Var convex_mix(Var gate, Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::same_tape(gate, a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Tensor& gv = gate.value();
  detail::require_same_shape("convex_mix", av, bv);
  const std::size_t rows = av.rows();
  const std::size_t cols = av.cols();
  const bool per_row = gv.size() == rows && gv.cols() == 1 && cols != 1;
  if (!per_row && gv.size() != av.size()) {
    throw DimensionError("convex_mix: gate shape " + to_string(gv) +
                         " incompatible with " + to_string(av));
  }
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double g = per_row ? gv[r] : gv[i];
      const double v = g * av[i] + (1.0 - g) * bv[i];
      // Rounding can land one ulp outside the segment [a, b].
      out[i] = std::clamp(v, std::min(av[i], bv[i]), std::max(av[i], bv[i]));
    }
  }
  return t.record("convex_mix", std::move(out), {gate.id, a.id, b.id},
                  [per_row, rows, cols](Tape& t, std::size_t self) {
                    const auto& in = t.inputs(self);
                    const Tensor& g = t.grad(self);
                    const Tensor& gv = t.value(in[0]);
                    const Tensor& av = t.value(in[1]);
                    const Tensor& bv = t.value(in[2]);
                    const bool dg = t.requires_grad(in[0]);
                    const bool da = t.requires_grad(in[1]);
                    const bool db = t.requires_grad(in[2]);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        const std::size_t gi = per_row ? r : i;
                        const double w = gv[gi];
                        if (dg) t.grad_mut(in[0])[gi] += g[i] * (av[i] - bv[i]);
                        if (da) t.grad_mut(in[1])[i] += g[i] * w;
                        if (db) t.grad_mut(in[2])[i] += g[i] * (1.0 - w);
                      }
                    }
                  });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2("matmul", A);
  detail::require_rank2("matmul", B);
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " + to_string(A) + " x " +
                         to_string(B));
  }
  Tensor out({m, n});
  kernels::gemm_nn(A.data(), B.data(), out.data(), m, k, n);
  return t.record("matmul", std::move(out), {a.id, b.id}, [m, k, n](Tape& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const Tensor& g = t.grad(self);
    if (t.requires_grad(in[0]))
      kernels::gemm_nt(g.data(), t.value(in[1]).data(), t.grad_mut(in[0]).data(), m, n, k);
    if (t.requires_grad(in[1]))
      kernels::gemm_tn(t.value(in[0]).data(), g.data(), t.grad_mut(in[1]).data(), m, k, n);
  });
}

// a[m x k] * b[n x k]^T -> [m x n]
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2("matmul_nt", A);
  detail::require_rank2("matmul_nt", B);
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[0];
  if (B.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ: " + to_string(A) + " x " +
                         to_string(B) + "^T");
  }
  Tensor out({m, n});
  kernels::gemm_nt(A.data(), B.data(), out.data(), m, k, n);
  return t.record("matmul_nt", std::move(out), {a.id, b.id},
                  [m, k, n](Tape& t, std::size_t self) {
                    const auto& in = t.inputs(self);
                    const Tensor& g = t.grad(self);
                    if (t.requires_grad(in[0]))
                      kernels::gemm_nn(g.data(), t.value(in[1]).data(),
                                       t.grad_mut(in[0]).data(), m, n, k);
                    if (t.requires_grad(in[1]))
                      kernels::gemm_tn(g.data(), t.value(in[0]).data(),
                                       t.grad_mut(in[1]).data(), m, n, k);
                  });
}

// x[rows x n] + v[n], v broadcast over rows.
inline Var add_rowvec(Var x, Var v) {
  Tape& t = detail::same_tape(x, v);
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  const std::size_t n = xv.cols();
  if (vv.size() != n) {
    throw DimensionError("add_rowvec: bias " + to_string(vv) + " does not match " +
                         to_string(xv));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) detail::axpy(out.row(r), vv.values());
  return t.record("add_rowvec", std::move(out), {x.id, v.id}, [n](Tape& t, std::size_t self) {
    const auto& in = t.inputs(self);
    const Tensor& g = t.grad(self);
    if (t.requires_grad(in[0])) detail::axpy(t.grad_mut(in[0]).values(), g.values());
    if (t.requires_grad(in[1])) {
      auto dv = t.grad_mut(in[1]).values();
      for (std::size_t r = 0; r < g.rows(); ++r) detail::axpy(dv, g.row(r));
    }
  });
}

inline Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

// ---------------------------------------------------------------- shape plumbing

inline Var reshape(Var x, Shape shape) {
  if (element_count(shape) != x.value().size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.value()) + " as " +
                         to_string(shape));
  }
  return x.tape->record("reshape", x.value().reshaped(std::move(shape)), {x.id},
                        [](Tape& t, std::size_t self) {
                          const std::size_t xi = t.inputs(self)[0];
                          detail::axpy(t.grad_mut(xi).values(), t.grad(self).values());
                        });
}

inline Var concat_lastdim(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat_lastdim: row mismatch " + to_string(av) + " vs " +
                         to_string(bv));
  }
  const std::size_t rows = av.rows(), p = av.cols(), q = bv.cols();
  Tensor out({rows, p + q});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.row(r).data(), p, out.row(r).data());
    std::copy_n(bv.row(r).data(), q, out.row(r).data() + p);
  }
  return t.record("concat_lastdim", std::move(out), {a.id, b.id},
                  [rows, p, q](Tape& t, std::size_t self) {
                    const auto& in = t.inputs(self);
                    const Tensor& g = t.grad(self);
                    if (t.requires_grad(in[0])) {
                      Tensor& d = t.grad_mut(in[0]);
                      for (std::size_t r = 0; r < rows; ++r)
                        detail::axpy(d.row(r), g.row(r).subspan(0, p));
                    }
                    if (t.requires_grad(in[1])) {
                      Tensor& d = t.grad_mut(in[1]);
                      for (std::size_t r = 0; r < rows; ++r)
                        detail::axpy(d.row(r), g.row(r).subspan(p, q));
                    }
                  });
}

// Rectangular window x[r0 : r0+nr, c0 : c0+nc] of a matrix.
inline Var slice(Var x, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  const Tensor& xv = x.value();
  if (r0 + nr > xv.rows() || c0 + nc > xv.cols()) {
    throw DimensionError("slice: window out of range for " + to_string(xv));
  }
  Tensor out({nr, nc});
  for (std::size_t r = 0; r < nr; ++r) {
    std::copy_n(xv.row(r0 + r).data() + c0, nc, out.row(r).data());
  }
  return x.tape->record("slice", std::move(out), {x.id},
                        [r0, nr, c0, nc](Tape& t, std::size_t self) {
                          const std::size_t xi = t.inputs(self)[0];
                          const Tensor& g = t.grad(self);
                          Tensor& d = t.grad_mut(xi);
                          for (std::size_t r = 0; r < nr; ++r)
                            detail::axpy(d.row(r0 + r).subspan(c0, nc), g.row(r));
                        });
}

struct Block {
  Var var;
  std::size_t row = 0;
  std::size_t col = 0;
};

// Assembles non-overlapping blocks into a zero-initialized [rows x cols] matrix.
inline Var place_blocks(Tape& t, std::size_t rows, std::size_t cols,
                        const std::vector<Block>& blocks) {
  Tensor out({rows, cols});
  std::vector<std::size_t> ids;
  std::vector<std::array<std::size_t, 4>> geom;
  for (const auto& b : blocks) {
    const Tensor& v = b.var.value();
    if (b.row + v.rows() > rows || b.col + v.cols() > cols) {
      throw DimensionError("place_blocks: block " + to_string(v) + " out of range");
    }
    for (std::size_t r = 0; r < v.rows(); ++r) {
      std::copy_n(v.row(r).data(), v.cols(), out.row(b.row + r).data() + b.col);
    }
    ids.push_back(b.var.id);
    geom.push_back({b.row, b.col, v.rows(), v.cols()});
  }
  return t.record("place_blocks", std::move(out), std::move(ids),
                  [geom = std::move(geom)](Tape& t, std::size_t self) {
                    const auto& in = t.inputs(self);
                    const Tensor& g = t.grad(self);
                    for (std::size_t i = 0; i < in.size(); ++i) {
                      if (!t.requires_grad(in[i])) continue;
                      const auto [r0, c0, nr, nc] = geom[i];
                      Tensor& d = t.grad_mut(in[i]);
                      for (std::size_t r = 0; r < nr; ++r)
                        detail::axpy(d.row(r), g.row(r0 + r).subspan(c0, nc));
                    }
                  });
}

// Row gather: out[r] = table[index[r]]. A rank-1 table is treated as a column.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
  const Tensor& tv = table.value();
  const std::size_t n = tv.rank() == 1 ? tv.size() : tv.rows();
  const std::size_t c = tv.rank() == 1 ? 1 : tv.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out({index.size(), c});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw DataError("gather_rows: index " + std::to_string(index[r]) +
                      " out of range for table with " + std::to_string(n) + " rows");
    }
    std::copy_n(tv.data() + index[r] * c, c, out.row(r).data());
  }
  return table.tape->record("gather_rows", std::move(out), {table.id},
                            [index = std::move(index), c](Tape& t, std::size_t self) {
                              const std::size_t ti = t.inputs(self)[0];
                              const Tensor& g = t.grad(self);
                              double* d = t.grad_mut(ti).data();
                              for (std::size_t r = 0; r < index.size(); ++r)
                                detail::axpy({d + index[r] * c, c}, g.row(r));
                            });
}

// ---------------------------------------------------------------- reductions

inline Var sum_all(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->record("sum_all", Tensor::scalar(s), {x.id}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.inputs(self)[0];
    const double g = t.grad(self)[0];
    for (double& v : t.grad_mut(xi).values()) v += g;
  });
}

// [rows x n] -> [rows x 1]
inline Var sum_lastdim(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v;
    out[r] = s;
  }
  return x.tape->record("sum_lastdim", std::move(out), {x.id}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.inputs(self)[0];
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad_mut(xi);
    for (std::size_t r = 0; r < d.rows(); ++r)
      for (double& v : d.row(r)) v += g[r];
  });
}

// Mean over row segments [offsets[b], offsets[b+1]) of a packed [N x d]
// matrix -> [B x d].
inline Var mean_pool_segments(Var x, std::vector<std::size_t> offsets) {
  const Tensor& xv = x.value();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != xv.rows()) {
    throw DimensionError("mean_pool_segments: offsets do not cover " + to_string(xv));
  }
  const std::size_t B = offsets.size() - 1, d = xv.cols();
  Tensor out({B, d});
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = offsets[b + 1] - offsets[b];
    if (offsets[b + 1] <= offsets[b]) throw DimensionError("mean_pool_segments: empty segment");
    auto o = out.row(b);
    for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) detail::axpy(o, xv.row(r));
    for (double& v : o) v /= static_cast<double>(len);
  }
  return x.tape->record("mean_pool_segments", std::move(out), {x.id},
                        [offsets = std::move(offsets)](Tape& t, std::size_t self) {
                          const std::size_t xi = t.inputs(self)[0];
                          const Tensor& g = t.grad(self);
                          Tensor& dx = t.grad_mut(xi);
                          for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
                            const double inv =
                                1.0 / static_cast<double>(offsets[b + 1] - offsets[b]);
                            for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r)
                              detail::axpy(dx.row(r), g.row(b), inv);
                          }
                        });
}

// ---------------------------------------------------------------- normalization

inline Var softmax_lastdim(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto in = xv.row(r);
    auto o = out.row(r);
    double mx = in[0];
    for (double v : in) {
      if (std::isnan(v)) throw NumericError("softmax_lastdim: NaN input");
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return x.tape->record("softmax_lastdim", std::move(out), {x.id}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.inputs(self)[0];
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& dx = t.grad_mut(xi);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto yr = y.row(r);
      const auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
      auto d = dx.row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) d[j] += yr[j] * (gr[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  Tape& t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters do not match " + to_string(xv));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return t.record("layer_norm", std::move(out), {x.id, gamma.id, beta.id},
                  [xhat = std::move(xhat), rstd = std::move(rstd), d](Tape& t, std::size_t self) {
                    const auto& in = t.inputs(self);
                    const Tensor& g = t.grad(self);
                    const Tensor& gv = t.value(in[1]);
                    const std::size_t rows = g.rows();
                    if (t.requires_grad(in[0])) {
                      Tensor& dx = t.grad_mut(in[0]);
                      std::vector<double> dh(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          dh[j] = g[r * d + j] * gv[j];
                          m1 += dh[j];
                          m2 += dh[j] * xhat[r * d + j];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j)
                          dx[r * d + j] += rstd[r] * (dh[j] - m1 - xhat[r * d + j] * m2);
                      }
                    }
                    if (t.requires_grad(in[1])) {
                      Tensor& dg = t.grad_mut(in[1]);
                      for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += g[i] * xhat[i];
                    }
                    if (t.requires_grad(in[2])) {
                      Tensor& db = t.grad_mut(in[2]);
                      for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                    }
                  });
}

// ---------------------------------------------------------------- convolution

// Depthwise 1-D convolution over each packed segment of p[N x d]:
// out[i, c] = sum_{k=-K..K} kernels[k+K, c] * p[i+k, c], with neighbours
// outside the segment treated as zero. No bias.
inline Var depthwise_conv1d(Var p, Var kernels, int half_window,
                            std::vector<std::size_t> offsets) {
  Tape& t = detail::same_tape(p, kernels);
  if (half_window < 0) {
    throw ParameterError("depthwise_conv1d: half window K must be >= 0, got " +
                         std::to_string(half_window));
  }
  const Tensor& pv = p.value();
  const Tensor& kv = kernels.value();
  const std::size_t d = pv.cols();
  const std::size_t taps = 2 * static_cast<std::size_t>(half_window) + 1;
  if (kv.rows() != taps || kv.cols() != d) {
    throw DimensionError("depthwise_conv1d: kernels " + to_string(kv) + " expected [" +
                         std::to_string(taps) + "x" + std::to_string(d) + "]");
  }
  if (offsets.empty()) offsets = {0, pv.rows()};
  if (offsets.front() != 0 || offsets.back() != pv.rows()) {
    throw DimensionError("depthwise_conv1d: offsets do not cover " + to_string(pv));
  }
  const long K = half_window;
  Tensor out(pv.shape());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const long lo = static_cast<long>(offsets[s]);
    const long hi = static_cast<long>(offsets[s + 1]);
    for (long i = lo; i < hi; ++i) {
      auto o = out.row(static_cast<std::size_t>(i));
      for (long k = -K; k <= K; ++k) {
        const long j = i + k;
        if (j < lo || j >= hi) continue;
        const auto w = kv.row(static_cast<std::size_t>(k + K));
        const auto src = pv.row(static_cast<std::size_t>(j));
        for (std::size_t c = 0; c < d; ++c) o[c] += w[c] * src[c];
      }
    }
  }
  return t.record(
      "depthwise_conv1d", std::move(out), {p.id, kernels.id},
      [offsets = std::move(offsets), K, d](Tape& t, std::size_t self) {
        const auto& in = t.inputs(self);
        const Tensor& g = t.grad(self);
        const Tensor& pv = t.value(in[0]);
        const Tensor& kv = t.value(in[1]);
        const bool dp = t.requires_grad(in[0]);
        const bool dk = t.requires_grad(in[1]);
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const long lo = static_cast<long>(offsets[s]);
          const long hi = static_cast<long>(offsets[s + 1]);
          for (long i = lo; i < hi; ++i) {
            const auto gi = g.row(static_cast<std::size_t>(i));
            for (long k = -K; k <= K; ++k) {
              const long j = i + k;
              if (j < lo || j >= hi) continue;
              const auto tap = static_cast<std::size_t>(k + K);
              const auto row = static_cast<std::size_t>(j);
              if (dp) {
                auto dst = t.grad_mut(in[0]).row(row);
                const auto w = kv.row(tap);
                for (std::size_t c = 0; c < d; ++c) dst[c] += w[c] * gi[c];
              }
              if (dk) {
                auto dst = t.grad_mut(in[1]).row(tap);
                const auto src = pv.row(row);
                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c] * gi[c];
              }
            }
          }
        }
      });
}

inline Var depthwise_conv1d(Var p, Var kernels, int half_window) {
  return depthwise_conv1d(p, kernels, half_window, {});
}

// ---------------------------------------------------------------- regularization / loss

// Inverted dropout; identity when rate == 0.
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ParameterError("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const Tensor& xv = x.value();
  Tensor mask(xv.shape());
  const double s = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = keep(rng) ? s : 0.0;
  Var m = x.tape->constant(std::move(mask));
  return mul(x, m);
}

// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  detail::require_rank2("cross_entropy", lv);
  const std::size_t B = lv.rows(), C = lv.cols();
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(B) + " rows");
  }
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) {
      throw DataError("cross_entropy: label " + std::to_string(labels[b]) +
                      " out of range for " + std::to_string(C) + " classes");
    }
    const auto row = lv.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      probs(b, c) = std::exp(row[c] - mx);
      sum += probs(b, c);
    }
    for (std::size_t c = 0; c < C; ++c) probs(b, c) /= sum;
    loss += -(row[labels[b]] - mx - std::log(sum));
  }
  loss /= static_cast<double>(B);
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(loss), {logits.id},
      [probs = std::move(probs), labels, B, C](Tape& t, std::size_t self) {
        const std::size_t li = t.inputs(self)[0];
        const double g = t.grad(self)[0] / static_cast<double>(B);
        Tensor& d = t.grad_mut(li);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            d(b, c) += g * (probs(b, c) - (c == labels[b] ? 1.0 : 0.0));
          }
        }
      });
}

}  // namespace posfuse
