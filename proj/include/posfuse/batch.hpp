#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "errors.hpp"

namespace posfuse {

inline constexpr int kPadId = 0;
inline constexpr int kUnknownId = 1;

struct Example {
  std::vector<int> tokens;
  int label = 0;

  bool operator==(const Example&) const = default;
};

// Padded token matrix [size x padded_length] with pad id 0 beyond each
// sequence's length.
struct Batch {
  std::size_t size = 0;
  std::size_t padded_length = 0;
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;

  int token(std::size_t b, std::size_t i) const { return tokens[b * padded_length + i]; }
};

inline Batch make_batch(std::span<const Example> examples, std::size_t pad_to = 0) {
  Batch batch;
  batch.size = examples.size();
  std::size_t longest = 0;
  for (const auto& ex : examples) longest = std::max(longest, ex.tokens.size());
  batch.padded_length = std::max(longest, pad_to);
  batch.tokens.assign(batch.size * batch.padded_length, kPadId);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& ex = examples[b];
    if (ex.tokens.empty()) throw DataError("make_batch: empty example");
    std::copy(ex.tokens.begin(), ex.tokens.end(),
              batch.tokens.begin() + static_cast<long>(b * batch.padded_length));
    batch.lengths.push_back(ex.tokens.size());
    batch.labels.push_back(ex.label);
  }
  return batch;
}

inline Batch make_batch(const std::vector<Example>& examples, std::size_t pad_to = 0) {
  return make_batch(std::span<const Example>(examples), pad_to);
}

}  // namespace posfuse
