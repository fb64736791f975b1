#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hybridnorm/checkpoint.hpp"
#include "hybridnorm/csv.hpp"
#include "hybridnorm/model.hpp"
#include "hybridnorm/optimizer.hpp"
#include "hybridnorm/rng.hpp"

namespace hybridnorm {

enum class DatasetKind { Copy, ModularAdd, ByteText };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Copy: return "copy";
    case DatasetKind::ModularAdd: return "modular-add";
    case DatasetKind::ByteText: return "byte-text";
  }
  return "?";
}

inline std::optional<DatasetKind> parse_dataset_kind(std::string_view name) {
  for (auto k : {DatasetKind::Copy, DatasetKind::ModularAdd, DatasetKind::ByteText})
    if (to_string(k) == name) return k;
  return std::nullopt;
}

struct DataConfig {
  DatasetKind kind = DatasetKind::Copy;
  std::size_t length = 65536;
  std::size_t alphabet = 16;   // copy: symbols drawn from [0, alphabet)
  std::size_t prefix_len = 8;  // copy: symbols per episode before the delimiter
  std::size_t modulus = 0;     // modular-add: 0 means the vocabulary size
};

// Public-domain excerpt used by the byte-text corpus.
inline constexpr std::string_view kByteText =
    "Four score and seven years ago our fathers brought forth on this continent, a new nation, conceived in "
    "Liberty, and dedicated to the proposition that all men are created equal. Now we are engaged in a great "
    "civil war, testing whether that nation, or any nation so conceived and so dedicated, can long endure. We "
    "are met on a great battle-field of that war. We have come to dedicate a portion of that field, as a final "
    "resting place for those who here gave their lives that that nation might live. It is altogether fitting "
    "and proper that we should do this. But, in a larger sense, we can not dedicate -- we can not consecrate "
    "-- we can not hallow -- this ground. The brave men, living and dead, who struggled here, have consecrated "
    "it, far above our poor power to add or detract. The world will little note, nor long remember what we say "
    "here, but it can never forget what they did here. It is for us the living, rather, to be dedicated here "
    "to the unfinished work which they who fought here have thus far so nobly advanced. It is rather for us to "
    "be here dedicated to the great task remaining before us -- that from these honored dead we take increased "
    "devotion to that cause for which they gave the last full measure of devotion -- that we here highly "
    "resolve that these dead shall not have died in vain -- that this nation, under God, shall have a new "
    "birth of freedom -- and that government of the people, by the people, for the people, shall not perish "
    "from the earth.\n";

// Deterministic token stream per (kind, seed).
inline std::vector<int> synthetic_dataset(DatasetKind kind, std::uint64_t seed, std::size_t length,
                                          std::size_t vocab, const DataConfig& dc = {}) {
  std::vector<int> out;
  out.reserve(length);
  Rng rng(seed);
  switch (kind) {
    case DatasetKind::Copy: {
      if (dc.alphabet < 1 || dc.alphabet + 1 > vocab) {
        throw ConfigError("data.alphabet: needs 1 <= alphabet < vocab (the delimiter is vocab-1)");
      }
      if (dc.prefix_len < 1) throw ConfigError("data.prefix_len: must be >= 1");
      const int delim = int(vocab - 1);
      std::vector<int> prefix(dc.prefix_len);
      while (out.size() < length) {
        for (auto& t : prefix) t = int(rng() % dc.alphabet);
        for (int t : prefix) out.push_back(t);
        out.push_back(delim);
        for (int t : prefix) out.push_back(t);
      }
      break;
    }
    case DatasetKind::ModularAdd: {
      const std::size_t m = dc.modulus ? dc.modulus : vocab;
      if (m < 1 || m > vocab) throw ConfigError("data.modulus: must lie in [1, vocab]");
      while (out.size() < length) {
        const std::size_t a = rng() % m, b = rng() % m;
        out.push_back(int(a));
        out.push_back(int(b));
        out.push_back(int((a + b) % m));
      }
      break;
    }
    case DatasetKind::ByteText: {
      if (vocab < 256) throw ConfigError("model.vocab: byte-text needs a vocabulary of at least 256");
      std::size_t at = std::size_t(seed % kByteText.size());
      while (out.size() < length) {
        out.push_back(int(static_cast<unsigned char>(kByteText[at])));
        at = (at + 1) % kByteText.size();
      }
      break;
    }
  }
  out.resize(length);
  return out;
}

struct TrainConfig {
  ModelConfig model;
  double lr_peak = 3e-3;
  double lr_min = 3e-4;
  std::size_t warmup = 50;
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  AdamWSettings adam;
  double clip = 1.0;
  std::uint64_t seed = 0;
  DataConfig data;
  std::size_t eval_interval = 100;  // 0 disables evaluation
  std::size_t eval_batches = 4;
  double divergence_factor = 3.0;  // loss above factor * ln(vocab) counts as divergence; 0 disables

  void validate() const {
    model.validate();
    adam.validate();
    auto need = [](bool ok, const char* msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(steps >= 1, "train.steps: must be >= 1");
    need(lr_min > 0.0, "train.lr_min: must be > 0");
    need(lr_min <= lr_peak, "train.lr_min: must not exceed train.lr_peak");
    need(warmup <= steps, "train.warmup: must not exceed train.steps");
    need(batch_size >= 1, "train.batch_size: must be >= 1");
    need(clip > 0.0, "train.clip: must be > 0");
    need(divergence_factor >= 0.0, "train.divergence_factor: must be >= 0");
    need(data.length >= 2 * (model.context + 1), "data.length: must hold at least two context windows");
  }
};

// Linear warmup from 0 to lr_peak, then cosine decay reaching lr_min at cfg.steps.
inline double lr_schedule(const TrainConfig& cfg, std::size_t step) {
  if (step > cfg.steps) throw DomainError("lr_schedule: step beyond train.steps");
  if (step < cfg.warmup) return cfg.lr_peak * double(step) / double(cfg.warmup);
  const std::size_t span = cfg.steps - cfg.warmup;
  if (span == 0) return cfg.lr_min;
  const double progress = double(step - cfg.warmup) / double(span);
  return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool diverged = false;
};

struct EvalMetrics {
  std::size_t step = 0;
  double val_loss = 0.0;
};

struct MetricsLog {
  std::vector<StepMetrics> steps;
  std::vector<EvalMetrics> evals;
  bool diverged = false;
  std::size_t divergence_step = 0;

  std::string steps_csv() const {
    std::ostringstream o;
    o << "step,lr,loss,grad_norm,diverged\n";
    for (const auto& s : steps) {
      o << s.step << ',' << fmt_double(s.lr) << ',' << fmt_double(s.loss) << ',' << fmt_double(s.grad_norm) << ','
        << (s.diverged ? 1 : 0) << '\n';
    }
    return o.str();
  }

  std::string evals_csv() const {
    std::ostringstream o;
    o << "step,val_loss\n";
    for (const auto& e : evals) o << e.step << ',' << fmt_double(e.val_loss) << '\n';
    return o.str();
  }
};

// Training stream split: the last tenth of the token stream is held out for validation.
struct Corpus {
  std::vector<int> train;
  std::vector<int> valid;

  static Corpus make(const TrainConfig& cfg) {
    const auto all =
        synthetic_dataset(cfg.data.kind, derive_seed(cfg.seed, 1), cfg.data.length, cfg.model.vocab, cfg.data);
    const std::size_t cut = std::max(all.size() - all.size() / 10, cfg.model.context + 1);
    Corpus c;
    c.train.assign(all.begin(), all.begin() + std::ptrdiff_t(cut));
    c.valid.assign(all.begin() + std::ptrdiff_t(cut), all.end());
    if (c.valid.size() < cfg.model.context + 1) c.valid = c.train;
    return c;
  }
};

inline Batch sample_batch(const std::vector<int>& stream, std::size_t batch, std::size_t seq_len, Rng& rng) {
  if (stream.size() < seq_len + 1) throw ConfigError("data.length: stream shorter than one context window");
  Batch b;
  b.seq_len = seq_len;
  const std::size_t span = stream.size() - seq_len;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t at = rng() % span;
    b.tokens.insert(b.tokens.end(), stream.begin() + std::ptrdiff_t(at), stream.begin() + std::ptrdiff_t(at + seq_len));
    b.targets.insert(b.targets.end(), stream.begin() + std::ptrdiff_t(at + 1),
                     stream.begin() + std::ptrdiff_t(at + 1 + seq_len));
  }
  return b;
}

struct TrainOptions {
  // Called before the update of each step with the parameters that step differentiates.
  std::function<void(std::size_t step, const ModelParams&, const Batch&)> on_step;
  std::optional<std::string> checkpoint_path;
};

struct TrainResult {
  MetricsLog log;
  ModelParams params;
  OptimizerState optimizer;
};

inline double evaluate(const TrainConfig& cfg, const ModelParams& p, const std::vector<int>& valid) {
  Rng rng(derive_seed(cfg.seed, 3));
  double total = 0.0;
  for (std::size_t i = 0; i < cfg.eval_batches; ++i)
    total += model_loss(cfg.model, p, sample_batch(valid, cfg.batch_size, cfg.model.context, rng));
  return total / double(cfg.eval_batches);
}

inline TrainResult train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  TrainResult res;
  res.params = init_params(cfg.model, cfg.seed);
  res.optimizer = OptimizerState::zeros_for(res.params);
  const Corpus corpus = Corpus::make(cfg);
  Rng batch_rng(derive_seed(cfg.seed, 2));
  const double limit =
      cfg.divergence_factor > 0.0 ? cfg.divergence_factor * std::log(double(cfg.model.vocab)) : INFINITY;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sample_batch(corpus.train, cfg.batch_size, cfg.model.context, batch_rng);
    if (opts.on_step) opts.on_step(step, res.params, batch);
    LossAndGrads lg = loss_and_grads(cfg.model, res.params, batch);
    const double lr = lr_schedule(cfg, step);
    if (!lg.finite || lg.loss > limit) {
      res.log.steps.push_back({step, lr, lg.loss, lg.finite ? global_norm(lg.grads) : NAN, true});
      res.log.diverged = true;
      res.log.divergence_step = step;
      break;
    }
    const double g = clip_grads(lg.grads, cfg.clip);
    adamw_step(res.params, lg.grads, res.optimizer, cfg.adam, lr);
    res.log.steps.push_back({step, lr, lg.loss, g, false});
    if (cfg.eval_interval && (step % cfg.eval_interval == 0 || step == cfg.steps)) {
      res.log.evals.push_back({step, evaluate(cfg, res.params, corpus.valid)});
    }
  }
  if (opts.checkpoint_path) {
    const std::size_t last = res.log.steps.empty() ? 0 : res.log.steps.back().step - (res.log.diverged ? 1 : 0);
    save_checkpoint(*opts.checkpoint_path, Checkpoint{cfg.model, cfg.seed, last, res.params, res.optimizer});
  }
  return res;
}

}  // namespace hybridnorm
