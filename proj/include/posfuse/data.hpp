#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "batch.hpp"
#include "config.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace posfuse {

// ------------------------------------------------------------------ vocabulary

// Token strings indexed by id. Ids 0 and 1 are reserved for padding and
// unknown tokens.
class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<unk>"} {}

  explicit Vocab(const std::vector<std::string>& words) : Vocab() {
    for (const auto& w : words) add(w);
  }

  // Top (vocab_size - 2) tokens by frequency, ties broken lexicographically.
  static Vocab build(const std::vector<std::vector<std::string>>& docs, std::size_t vocab_size) {
    std::map<std::string, std::size_t> counts;
    for (const auto& doc : docs)
      for (const auto& w : doc) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    const std::size_t keep = vocab_size > 2 ? vocab_size - 2 : 0;
    for (std::size_t i = 0; i < ranked.size() && i < keep; ++i) v.add(ranked[i].first);
    return v;
  }

  // One token per line; line number is the id.
  static Vocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open vocab file '" + path + "'");
    Vocab v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.add(line);
    }
    if (v.tokens_.size() < 2) throw DataError("vocab file '" + path + "' too short");
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write vocab file '" + path + "'");
    for (const auto& t : tokens_) f << t << '\n';
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnknownId : it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

 private:
  void add(const std::string& w) {
    if (ids_.count(w)) return;
    ids_[w] = static_cast<int>(tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercase, whitespace-split.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

struct RawRecord {
  std::string text;
  int label = 0;
};

// Parses `{"text": ..., "label": ...}` per line. Blank lines are skipped.
inline std::vector<RawRecord> read_jsonl_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open corpus '" + path + "'");
  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("label") ||
        !j["text"].is_string() || !j["label"].is_number_integer()) {
      throw DataError(where + ": record needs string 'text' and integer 'label'");
    }
    out.push_back({j["text"].get<std::string>(), j["label"].get<int>()});
  }
  return out;
}

// Maps a JSON-lines corpus onto `vocab`. Labels must lie in [0, n_classes);
// sequences are truncated to max_length and empty texts become one unknown
// token.
inline std::vector<Example> load_jsonl_corpus(const std::string& path, const Vocab& vocab,
                                              std::size_t max_length = 0,
                                              std::size_t n_classes = 0) {
  std::vector<Example> out;
  std::size_t i = 0;
  for (const auto& rec : read_jsonl_records(path)) {
    ++i;
    if (rec.label < 0 || (n_classes && static_cast<std::size_t>(rec.label) >= n_classes)) {
      throw DataError(path + ": record " + std::to_string(i) + " has unknown label " +
                      std::to_string(rec.label));
    }
    Example ex;
    for (const auto& w : tokenize(rec.text)) {
      if (max_length && ex.tokens.size() == max_length) break;
      ex.tokens.push_back(vocab.id(w));
    }
    if (ex.tokens.empty()) ex.tokens.push_back(kUnknownId);
    ex.label = rec.label;
    out.push_back(std::move(ex));
  }
  return out;
}

// ------------------------------------------------------------------ synthetic tasks

struct Split {
  std::vector<Example> train;
  std::vector<Example> test;
};

namespace detail {

// Draws n unique examples with `draw`, first 80% train, rest test.
template <typename Draw>
Split unique_split(std::size_t n, Rng& rng, Draw draw) {
  std::set<std::vector<int>> seen;
  std::vector<Example> all;
  all.reserve(n);
  std::size_t attempts = 0;
  while (all.size() < n) {
    if (++attempts > 100 * n + 1000) {
      throw DataError("synthetic task: cannot draw " + std::to_string(n) +
                      " distinct examples; increase length or vocabulary");
    }
    std::optional<Example> ex = draw(rng);
    if (!ex || !seen.insert(ex->tokens).second) continue;
    all.push_back(std::move(*ex));
  }
  const std::size_t n_train = n * 4 / 5;
  Split s;
  s.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
  s.test.assign(all.begin() + static_cast<long>(n_train), all.end());
  return s;
}

}  // namespace detail

inline int marker_token(std::size_t vocab_size) { return static_cast<int>(vocab_size) - 1; }

inline int marker_label(std::size_t position, std::size_t L) { return 2 * position >= L ? 1 : 0; }

// Filler tokens uniform over [2, vocab_size - 1); one marker (vocab_size - 1)
// at a uniform position u; label = [u >= L/2].
inline Split gen_marker_task(std::size_t n, std::size_t L, std::size_t vocab_size,
                             std::uint64_t seed) {
  if (L < 2) throw ConfigError("marker task needs L >= 2");
  if (vocab_size < 4) throw ConfigError("marker task needs vocab_size >= 4");
  Rng rng = make_rng(seed, Stream::TaskData, 1);
  std::uniform_int_distribution<int> filler(2, static_cast<int>(vocab_size) - 2);
  std::uniform_int_distribution<std::size_t> where(0, L - 1);
  return detail::unique_split(n, rng, [&](Rng& r) -> std::optional<Example> {
    Example ex;
    ex.tokens.resize(L);
    for (int& tok : ex.tokens) tok = filler(r);
    const std::size_t u = where(r);
    ex.tokens[u] = marker_token(vocab_size);
    ex.label = marker_label(u, L);
    return ex;
  });
}

// 1 if the designated token occurs more often in the first half than in the
// second, 0 if less often, nullopt on a tie.
inline std::optional<int> halves_label(const std::vector<int>& tokens, int designated) {
  const std::size_t half = tokens.size() / 2;
  long first = 0, second = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != designated) continue;
    (i < half ? first : second) += 1;
  }
  if (first == second) return std::nullopt;
  return first > second ? 1 : 0;
}

// Tokens uniform over [2, vocab_size); the designated token is vocab_size - 1.
// Ties are redrawn.
inline Split gen_halves_task(std::size_t n, std::size_t L, std::size_t vocab_size,
                             std::uint64_t seed) {
  if (L < 4 || L % 2 != 0) throw ConfigError("halves task needs even L >= 4");
  if (vocab_size < 4) throw ConfigError("halves task needs vocab_size >= 4");
  Rng rng = make_rng(seed, Stream::TaskData, 2);
  std::uniform_int_distribution<int> tok(2, static_cast<int>(vocab_size) - 1);
  const int designated = marker_token(vocab_size);
  return detail::unique_split(n, rng, [&](Rng& r) -> std::optional<Example> {
    Example ex;
    ex.tokens.resize(L);
    for (int& t : ex.tokens) t = tok(r);
    auto label = halves_label(ex.tokens, designated);
    if (!label) return std::nullopt;
    ex.label = *label;
    return ex;
  });
}

// ------------------------------------------------------------------ batching

// Permutation of [0, n) that depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, Stream::Shuffle, epoch);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Shuffled batches for one epoch; the last partial batch is kept.
inline std::vector<Batch> batch_iter(const std::vector<Example>& examples,
                                     std::size_t batch_size, std::uint64_t seed,
                                     std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  const auto perm = epoch_permutation(examples.size(), seed, epoch);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    std::vector<Example> chunk;
    for (std::size_t i = start; i < std::min(perm.size(), start + batch_size); ++i)
      chunk.push_back(examples[perm[i]]);
    out.push_back(make_batch(chunk));
  }
  return out;
}

// Sequential batches without shuffling, for evaluation.
inline std::vector<Batch> ordered_batches(const std::vector<Example>& examples,
                                          std::size_t batch_size) {
  std::vector<Batch> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const auto end = std::min(examples.size(), start + batch_size);
    out.push_back(make_batch(std::span<const Example>(examples).subspan(start, end - start)));
  }
  return out;
}

// ------------------------------------------------------------------ task spec

struct TaskSpec {
  std::string kind = "marker";  // marker | halves | jsonl
  std::size_t n = 2500;
  std::size_t length = 128;
  std::uint64_t seed = 0;
  std::string corpus_train;
  std::string corpus_test;

  static TaskSpec from_key_values(const KeyValues& kv) {
    TaskSpec s;
    ConfigReader r(kv);
    r.read("task", s.kind);
    r.read("task_n", s.n);
    r.read("task_length", s.length);
    r.read("task_seed", s.seed);
    r.read("corpus_train", s.corpus_train);
    r.read("corpus_test", s.corpus_test);
    if (s.kind != "marker" && s.kind != "halves" && s.kind != "jsonl")
      throw ConfigError("unknown task '" + s.kind + "' (expected marker, halves or jsonl)");
    return s;
  }

  KeyValues to_key_values() const {
    KeyValues kv{{"task", kind},
                 {"task_n", format_number(n)},
                 {"task_length", format_number(length)},
                 {"task_seed", format_number(seed)}};
    if (kind == "jsonl") {
      kv["corpus_train"] = corpus_train;
      kv["corpus_test"] = corpus_test;
    }
    return kv;
  }
};

struct Task {
  std::string name;
  std::vector<Example> train;
  std::vector<Example> test;
};

// The split depends on the task seed only, never on the run seed, so every
// run of a grid sees the same data.
inline Task make_task(const TaskSpec& spec, std::size_t vocab_size, std::size_t max_length,
                      std::size_t n_classes) {
  Task task;
  task.name = spec.kind;
  if (spec.kind == "marker" || spec.kind == "halves") {
    if (spec.length > max_length) {
      throw LengthError("task_length " + std::to_string(spec.length) + " exceeds max_length " +
                        std::to_string(max_length));
    }
    Split s = spec.kind == "marker" ? gen_marker_task(spec.n, spec.length, vocab_size, spec.seed)
                                    : gen_halves_task(spec.n, spec.length, vocab_size, spec.seed);
    task.name += "-L" + std::to_string(spec.length);
    task.train = std::move(s.train);
    task.test = std::move(s.test);
    return task;
  }
  std::vector<std::vector<std::string>> docs;
  for (const auto& rec : read_jsonl_records(spec.corpus_train)) docs.push_back(tokenize(rec.text));
  const Vocab vocab = Vocab::build(docs, vocab_size);
  task.train = load_jsonl_corpus(spec.corpus_train, vocab, max_length, n_classes);
  task.test = load_jsonl_corpus(spec.corpus_test, vocab, max_length, n_classes);
  return task;
}

}  // namespace posfuse
