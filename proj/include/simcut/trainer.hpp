// Copyright 2026 The SimCut Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Adam with inverse-sqrt warmup, the epoch loop, validation, checkpointing
// and fine-tuning from a pretrained checkpoint.

#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "simcut/decode.hpp"
#include "simcut/losses.hpp"
#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"
#include "simcut/text.hpp"
#include "simcut/transformer.hpp"

namespace simcut {

/// base * min(step / warmup, sqrt(warmup / step)) for step >= 1.
inline double lr_inverse_sqrt(std::size_t step, std::size_t warmup, double base) {
  if (step == 0) throw Error("lr_inverse_sqrt: steps are counted from 1");
  if (warmup == 0) throw Error("lr_inverse_sqrt: warmup must be positive");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base * std::min(s / w, std::sqrt(w / s));
}

struct OptimizerConfig {
  double base_lr = 5e-4;
  std::size_t warmup = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

class Adam {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  Adam() = default;
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return steps_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  /// Learning rate the next step will use.
  double next_lr() const { return lr_inverse_sqrt(steps_ + 1, cfg_.warmup, cfg_.base_lr); }

  /// Applies one update from the gradients accumulated on `params`. A tensor
  /// without gradient counts as zero gradient. Throws without touching any
  /// parameter when a gradient is not finite. Returns the learning rate used.
  double step(ModelParams& params) {
    for (const auto& [name, t] : params.tensors())
      for (double g : t.grad())
        if (!std::isfinite(g)) throw Error("non-finite gradient in " + name);
    ++steps_;
    const double lr = lr_inverse_sqrt(steps_, cfg_.warmup, cfg_.base_lr);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& [name, t] : params.tensors()) {
      auto& mo = moments_[name];
      const std::size_t n = t.numel();
      if (mo.m.empty()) {
        mo.m.assign(n, 0.0);
        mo.v.assign(n, 0.0);
      }
      auto grad = t.grad();
      auto values = t.mutable_values();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
        mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = mo.m[i] / c1, vhat = mo.v[i] / c2;
        values[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    return lr;
  }

 private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

enum class Phase { kPretrain, kFinetune };
enum class ValidationMetric { kBleu, kLoss };

inline const char* phase_name(Phase p) { return p == Phase::kPretrain ? "pretrain" : "finetune"; }

struct TrainConfig {
  TransformerConfig model;
  ObjectiveSpec objective;
  OptimizerConfig optimizer;
  std::size_t epochs = 10;
  std::size_t max_tokens = 4096;
  std::uint64_t seed = 1;
  Phase phase = Phase::kPretrain;
  ValidationMetric val_metric = ValidationMetric::kBleu;
  std::string output_dir;  // empty: nothing is written
  bool log_wall_clock = false;
  bool save_every_epoch = false;
  nlohmann::json run_config;  // stored in checkpoint metadata
};

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::kPretrain;
  double train_loss = 0.0;
  std::map<std::string, double> components;
  double lr = 0.0;
  double val_score = 0.0;
  double wall_seconds = 0.0;
};

struct TrainState {
  ModelParams params;
  ModelParams best_params;
  Adam optimizer;
  Phase phase = Phase::kPretrain;
  std::size_t epoch = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

/// Higher is better: corpus BLEU of greedy translations against the
/// references, or the negated token-mean label-smoothed CE.
inline double validate(const ModelParams& params, std::span<const SentencePair> valid, ValidationMetric metric,
                       const Vocabulary& vocab, double label_smoothing, std::size_t max_tokens) {
  if (valid.empty()) throw Error("validate: empty validation set");
  NoGradGuard guard;
  if (metric == ValidationMetric::kBleu) {
    std::vector<std::vector<int>> sources;
    std::vector<std::string> refs;
    for (const auto& p : valid) {
      sources.push_back(p.src);
      refs.push_back(decode(strip_eos(p.tgt), vocab));
    }
    DecodeConfig cfg;
    cfg.beam_size = 1;
    const auto hyps = translate(params, sources, vocab, cfg, /*greedy=*/true);
    return corpus_bleu_text(hyps, refs).bleu;
  }
  Rng order_rng(0);
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batch_by_tokens(valid, max_tokens, order_rng)) {
    auto r = forward(params, batch);
    weighted += ce_label_smoothed(r.dist, batch.target, label_smoothing).item() *
                static_cast<double>(batch.token_count);
    tokens += batch.token_count;
  }
  return -weighted / static_cast<double>(tokens);
}

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline nlohmann::json checkpoint_meta(const TrainConfig& cfg, const Vocabulary& vocab, std::size_t epoch,
                                      double val_score) {
  nlohmann::json meta;
  meta["epoch"] = epoch;
  meta["phase"] = phase_name(cfg.phase);
  meta["val_score"] = val_score;
  meta["val_metric"] = cfg.val_metric == ValidationMetric::kBleu ? "bleu" : "loss";
  meta["objective"] = objective_name(cfg.objective.kind);
  meta["seed"] = cfg.seed;
  meta["vocab_size"] = vocab.size();
  meta["vocab_fingerprint"] = vocab.fingerprint();
  meta["run_config"] = cfg.run_config;
  return meta;
}

}  // namespace detail

/// Called after each epoch with the record just appended.
using EpochCallback = std::function<void(const TrainState&)>;

/// Runs `cfg.epochs` epochs of token-budget mini-batch training. Starts from
/// `init` when given, otherwise from init_params seeded by cfg.seed. The
/// optimizer always starts fresh. Writes metrics.tsv, last.ckpt, best.ckpt and
/// best.txt when cfg.output_dir is set.
inline TrainState train(TrainConfig cfg, std::span<const SentencePair> train_set,
                        std::span<const SentencePair> valid_set, const Vocabulary& vocab,
                        const ModelParams* init = nullptr, const EpochCallback& on_epoch = {}) {
  if (train_set.empty()) throw Error("train: empty training set");
  if (valid_set.empty()) throw Error("train: empty validation set");
  cfg.objective.validate();
  cfg.model.vocab_size = vocab.size();
  TrainState st;
  st.phase = cfg.phase;
  if (init) {
    if (init->config().vocab_size != vocab.size())
      throw Error("train: initial parameters were built for a different vocabulary size");
    st.params = init->clone();
  } else {
    cfg.model.validate();
    Rng init_rng(derive_seed(cfg.seed, "init"));
    st.params = init_params(cfg.model, init_rng);
  }
  st.best_params = st.params.clone();
  st.optimizer = Adam(cfg.optimizer);

  const auto components = objective_components(cfg.objective.kind);
  std::ofstream log;
  namespace fs = std::filesystem;
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    log.open(fs::path(cfg.output_dir) / "metrics.tsv", std::ios::trunc);
    if (!log) throw Error("cannot write metrics log in " + cfg.output_dir);
    log << "epoch\tphase\ttrain_loss";
    for (const auto& c : components) log << '\t' << c;
    log << "\tlr\tval_score\twall_seconds\n";
  }

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, "batches", epoch));
    const auto batches = batch_by_tokens(train_set, cfg.max_tokens, order_rng);
    LossContext ctx;
    ctx.mode = Mode::kTrain;
    ctx.unirep_keep = unirep_probability(static_cast<double>(epoch - 1), cfg.objective.unirep);
    double loss_sum = 0.0;
    std::map<std::string, double> comp_sum;
    std::size_t tokens = 0;
    double lr = 0.0;
    for (const auto& batch : batches) {
      ++global_step;
      ctx.seed = derive_seed(cfg.seed, "step", global_step);
      st.params.zero_grad();
      const LossResult res = compute_loss(cfg.objective, st.params, batch, ctx);
      if (!std::isfinite(res.total.item())) throw Error("non-finite training loss at step " + std::to_string(global_step));
      backward(res.total);
      lr = st.optimizer.step(st.params);
      const double w = static_cast<double>(batch.token_count);
      loss_sum += res.total.item() * w;
      for (const auto& [name, t] : res.components) comp_sum[name] += t.item() * w;
      tokens += batch.token_count;
    }
    st.params.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = cfg.phase;
    rec.train_loss = loss_sum / static_cast<double>(tokens);
    for (const auto& c : components) rec.components[c] = comp_sum[c] / static_cast<double>(tokens);
    rec.lr = lr;
    rec.val_score = validate(st.params, valid_set, cfg.val_metric, vocab, cfg.objective.weights.label_smoothing,
                             cfg.max_tokens);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.epoch = epoch;
    st.history.push_back(rec);

    const bool improved = rec.val_score > st.best_score;
    if (improved) {
      st.best_score = rec.val_score;
      st.best_epoch = epoch;
      st.best_params = st.params.clone();
    }
    if (!cfg.output_dir.empty()) {
      log << epoch << '\t' << phase_name(cfg.phase) << '\t' << detail::format_double(rec.train_loss);
      for (const auto& c : components) log << '\t' << detail::format_double(rec.components[c]);
      log << '\t' << detail::format_double(rec.lr) << '\t' << detail::format_double(rec.val_score) << '\t'
          << (cfg.log_wall_clock ? detail::format_double(rec.wall_seconds) : std::string("-")) << '\n';
      log.flush();
      const fs::path dir(cfg.output_dir);
      const auto meta = detail::checkpoint_meta(cfg, vocab, epoch, rec.val_score);
      save_checkpoint((dir / "last.ckpt").string(), st.params, meta);
      if (cfg.save_every_epoch)
        save_checkpoint((dir / ("epoch" + std::to_string(epoch) + ".ckpt")).string(), st.params, meta);
      if (improved) {
        save_checkpoint((dir / "best.ckpt").string(), st.params, meta);
        std::ofstream ptr(dir / "best.txt", std::ios::trunc);
        ptr << "best.ckpt\tepoch=" << epoch << "\tval_score=" << detail::format_double(rec.val_score) << '\n';
      }
    }
    if (on_epoch) on_epoch(st);
  }
  return st;
}

/// Continues training a pretrained checkpoint on new data with a fresh
/// optimizer and schedule. The architecture comes from the checkpoint; the
/// vocabulary must be the one the checkpoint was trained with.
inline TrainState finetune(const Checkpoint& ck, TrainConfig cfg, std::span<const SentencePair> train_set,
                           std::span<const SentencePair> valid_set, const Vocabulary& vocab,
                           const EpochCallback& on_epoch = {}) {
  if (ck.meta.contains("vocab_fingerprint") &&
      ck.meta.at("vocab_fingerprint").get<std::uint64_t>() != vocab.fingerprint())
    throw Error("finetune: vocabulary does not match the one the checkpoint was trained with");
  if (ck.params.config().vocab_size != vocab.size())
    throw Error("finetune: checkpoint vocabulary size differs from the given vocabulary");
  cfg.model = ck.params.config();
  cfg.phase = Phase::kFinetune;
  return train(std::move(cfg), train_set, valid_set, vocab, &ck.params, on_epoch);
}

}  // namespace simcut
