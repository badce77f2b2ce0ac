#pragma once

#include <cstdint>
#include <random>

#include "tensor.hpp"

namespace posfuse {

using Rng = std::mt19937_64;

// Independent streams derived from one run seed. Each stream is keyed on
// (seed, stream, counter), so consumers of one stream never shift another.
enum class Stream : std::uint64_t {
  Init = 1,
  Shuffle = 2,
  Dropout = 3,
  TaskData = 4,
  Misc = 5,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(counter),
                    static_cast<std::uint32_t>(counter >> 32)};
  return Rng(seq);
}

inline void fill_normal(Tensor& t, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.values()) v = dist(rng);
}

inline Tensor normal_tensor(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  fill_normal(t, rng, mean, stddev);
  return t;
}

}  // namespace posfuse
