#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <posfuse/posfuse.hpp>

namespace testing_support {

using namespace posfuse;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return normal_tensor(std::move(shape), rng, 0.0, stddev);
}

// c[m x n] = a[m x k] b[k x n], plain triple loop.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

// Central-difference gradient of f with respect to x.
inline Tensor numeric_grad(const std::function<double()>& f, Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Example make_example(std::vector<int> tokens, int label = 0) {
  return Example{std::move(tokens), label};
}

inline ModelConfig small_config(PeKind pe = PeKind::Sinusoidal, FusionKind f = FusionKind::Add) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 16;
  c.max_length = 32;
  c.relative_window = 4;
  c.gate_cnn_k = 2;
  c.dropout = 0.0;
  c.pe_family = pe;
  c.fusion = f;
  return c;
}

}  // namespace testing_support
