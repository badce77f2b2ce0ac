#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "config.hpp"
#include "data.hpp"
#include "model.hpp"

namespace posfuse {

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t eval_every = 0;  // steps; 0 disables intermediate evaluation
  std::size_t latency_trials = 10;
  std::size_t latency_warmup = 3;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }

  static TrainConfig from_key_values(const KeyValues& kv) {
    TrainConfig c;
    ConfigReader r(kv);
    r.read("seed", c.seed);
    r.read("epochs", c.epochs);
    r.read("batch_size", c.batch_size);
    r.read("lr", c.lr);
    r.read("beta1", c.beta1);
    r.read("beta2", c.beta2);
    r.read("adam_eps", c.adam_eps);
    r.read("weight_decay", c.weight_decay);
    r.read("eval_every", c.eval_every);
    r.read("latency_trials", c.latency_trials);
    r.read("latency_warmup", c.latency_warmup);
    c.validate();
    return c;
  }

  KeyValues to_key_values() const {
    return {{"seed", format_number(seed)},
            {"epochs", format_number(epochs)},
            {"batch_size", format_number(batch_size)},
            {"lr", format_number(lr)},
            {"beta1", format_number(beta1)},
            {"beta2", format_number(beta2)},
            {"adam_eps", format_number(adam_eps)},
            {"weight_decay", format_number(weight_decay)},
            {"eval_every", format_number(eval_every)},
            {"latency_trials", format_number(latency_trials)},
            {"latency_warmup", format_number(latency_warmup)}};
  }
};

// ------------------------------------------------------------------ Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

// One bias-corrected Adam step at step count `t` (>= 1). Weight decay, when
// nonzero, is decoupled: w -= lr * wd * w.
inline void adam_step(const std::vector<Parameter*>& params, AdamState& state, std::uint64_t t,
                      const TrainConfig& cfg) {
  if (t == 0) throw ContractError("adam_step: step count starts at 1");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: parameter set changed");
  state.t = t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.empty()) continue;
    auto w = p.value.values();
    const auto g = p.grad.values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      if (cfg.weight_decay > 0.0) w[j] -= cfg.lr * cfg.weight_decay * w[j];
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ------------------------------------------------------------------ evaluation

inline std::vector<int> predict(Model& model, const std::vector<Example>& examples,
                                std::size_t batch_size = 64) {
  std::vector<int> out;
  for (const auto& batch : ordered_batches(examples, batch_size)) {
    Tape t;
    const Tensor& logits = model.forward(t, batch).value();
    for (std::size_t b = 0; b < logits.rows(); ++b) {
      const auto row = logits.row(b);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

inline double accuracy(Model& model, const std::vector<Example>& examples) {
  if (examples.empty()) return 0.0;
  const auto pred = predict(model, examples);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == examples[i].label;
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

struct LatencyStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double std_ms = 0.0;
  std::size_t trials = 0;
};

inline LatencyStats summarize_latency(std::vector<double> ms) {
  LatencyStats s;
  s.trials = ms.size();
  if (ms.empty()) return s;
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(ms.size());
  if (ms.size() > 1) {
    double ss = 0.0;
    for (double v : ms) ss += (v - s.mean_ms) * (v - s.mean_ms);
    s.std_ms = std::sqrt(ss / static_cast<double>(ms.size() - 1));
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  return s;
}

// Wall time of single-example inference forwards; warmup runs discarded.
inline LatencyStats time_forward(Model& model, const Example& example, std::size_t warmup,
                                 std::size_t trials) {
  const Batch batch = make_batch(std::vector<Example>{example});
  std::vector<double> ms;
  for (std::size_t i = 0; i < warmup + trials; ++i) {
    const auto start = std::chrono::steady_clock::now();
    {
      Tape t;
      model.forward(t, batch);
    }
    const auto stop = std::chrono::steady_clock::now();
    if (i >= warmup) ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  return summarize_latency(std::move(ms));
}

// ------------------------------------------------------------------ training

struct RunRecord {
  std::string run_id;
  std::string task;
  PeKind pe_family = PeKind::Sinusoidal;
  FusionKind fusion = FusionKind::Add;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  std::vector<double> loss_trace;  // one entry per optimizer step
  std::vector<std::pair<std::size_t, double>> eval_trace;  // (step, test accuracy)
  double train_seconds = 0.0;
  LatencyStats latency;
  ParamCounts params;
  std::string status = "ok";  // ok | aborted
  std::string message;
};

inline std::string make_run_id(const std::string& task, PeKind pe, FusionKind fusion,
                               std::uint64_t seed) {
  return task + "." + to_string(pe) + "." + to_string(fusion) + ".s" + std::to_string(seed);
}

// Trains a fresh model on task.train and reports accuracy on task.test.
// Batch order depends only on (seed, epoch); weight init only on seed; the
// dropout stream is separate from both. A non-finite loss aborts the run and
// is reported in the record rather than thrown. `on_finished`, when given,
// sees the trained model before it is destroyed.
inline RunRecord run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                              const Task& task,
                              const std::function<void(Model&)>& on_finished = nullptr) {
  train_cfg.validate();
  RunRecord rec;
  rec.task = task.name;
  rec.pe_family = model_cfg.pe_family;
  rec.fusion = model_cfg.fusion;
  rec.seed = train_cfg.seed;
  rec.run_id = make_run_id(task.name, model_cfg.pe_family, model_cfg.fusion, train_cfg.seed);

  Model model(model_cfg, train_cfg.seed);
  rec.params = model.count_params();
  const auto params = model.parameters();
  AdamState adam;
  Rng drop_rng = make_rng(train_cfg.seed, Stream::Dropout);
  std::uint64_t step = 0;

  const auto start = std::chrono::steady_clock::now();
  try {
    for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
      for (const auto& batch : batch_iter(task.train, train_cfg.batch_size, train_cfg.seed, epoch)) {
        model.zero_grad();
        Tape t;
        Var loss = model.loss(t, batch, {.train = true, .dropout_rng = &drop_rng});
        const double l = loss.value().item();
        if (!std::isfinite(l)) throw NumericError("non-finite training loss");
        rec.loss_trace.push_back(l);
        t.backward(loss);
        adam_step(params, adam, ++step, train_cfg);
        if (train_cfg.eval_every && step % train_cfg.eval_every == 0)
          rec.eval_trace.emplace_back(step, accuracy(model, task.test));
      }
    }
  } catch (const NumericError& e) {
    rec.status = "aborted";
    rec.message = e.what();
  }
  rec.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (rec.status == "ok") {
    rec.test_accuracy = accuracy(model, task.test);
    if (!task.test.empty() && train_cfg.latency_trials > 0) {
      rec.latency = time_forward(model, task.test.front(), train_cfg.latency_warmup,
                                 train_cfg.latency_trials);
    }
  }
  if (on_finished) on_finished(model);
  return rec;
}

}  // namespace posfuse
