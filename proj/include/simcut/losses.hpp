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

// Training objectives: label-smoothed cross-entropy and the consistency
// regularizers built on it (SimCut, Token Cutoff, R-Drop, VAT) plus plain CE
// over perturbed inputs (UniRep, WordDrop).
//
// All randomness of an objective evaluation derives from LossContext::seed:
// forward pass i draws dropout from derive_seed(seed, "dropout", i) and zero
// masks from derive_seed(seed, "mask", i). Re-evaluating with the same seed
// therefore reproduces every mask, which is what the gradient checks and the
// compositional oracles rely on.

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"
#include "simcut/text.hpp"
#include "simcut/transformer.hpp"

namespace simcut {

enum class ObjectiveKind { kCe, kSimCut, kTokenCutoff, kRDrop, kVat, kUniRep, kWordDrop };

inline const char* objective_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kCe: return "ce";
    case ObjectiveKind::kSimCut: return "simcut";
    case ObjectiveKind::kTokenCutoff: return "token_cutoff";
    case ObjectiveKind::kRDrop: return "rdrop";
    case ObjectiveKind::kVat: return "vat";
    case ObjectiveKind::kUniRep: return "unirep";
    case ObjectiveKind::kWordDrop: return "worddrop";
  }
  return "?";
}

inline ObjectiveKind parse_objective(const std::string& name) {
  for (auto k : {ObjectiveKind::kCe, ObjectiveKind::kSimCut, ObjectiveKind::kTokenCutoff, ObjectiveKind::kRDrop,
                 ObjectiveKind::kVat, ObjectiveKind::kUniRep, ObjectiveKind::kWordDrop})
    if (name == objective_name(k)) return k;
  throw Error("unknown objective '" + name + "'");
}

/// Component names reported by each objective, in log-column order.
inline std::vector<std::string> objective_components(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kSimCut: return {"ce", "simkl"};
    case ObjectiveKind::kTokenCutoff: return {"ce", "cut", "kl"};
    case ObjectiveKind::kRDrop: return {"ce", "rdrop_kl"};
    case ObjectiveKind::kVat: return {"ce", "vat_kl"};
    default: return {"ce"};
  }
}

struct LossWeights {
  double alpha = 3.0;
  double beta = 1.0;
  double p_cut = 0.05;
  std::size_t n_cutoff = 1;
  double label_smoothing = 0.1;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw Error("loss weights alpha/beta must be non-negative");
    if (!(p_cut >= 0.0 && p_cut <= 1.0)) throw Error("p_cut must lie in [0,1]");
    if (n_cutoff < 1) throw Error("n_cutoff must be at least 1");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw Error("label_smoothing must lie in [0,1)");
  }
};

struct VatSpec {
  double epsilon = 1.0;
  bool bidirectional = false;
};

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::kCe;
  LossWeights weights;
  VatSpec vat;
  bool simcut_bidirectional = true;
  UniRepSchedule unirep;
  double worddrop_keep = 0.9;

  void validate() const {
    weights.validate();
    if (!(vat.epsilon > 0.0)) throw Error("vat_epsilon must be positive");
    if (!(worddrop_keep >= 0.0 && worddrop_keep <= 1.0)) throw Error("worddrop_keep must lie in [0,1]");
    if (!(unirep.q > 0.0 && unirep.q <= 1.0) || !(unirep.k > 0.0)) throw Error("unirep q in (0,1], k > 0");
  }
};

/// Scalar view of a loss evaluation.
struct LossBreakdown {
  double total = 0.0;
  std::map<std::string, double> components;
  std::map<std::string, double> weights;
  std::size_t token_count = 0;

  double recomposed() const {
    double s = 0.0;
    for (const auto& [name, w] : weights) s += w * components.at(name);
    return s;
  }
};

struct LossResult {
  Tensor total;
  std::map<std::string, Tensor> components;
  std::map<std::string, double> weights;
  std::size_t token_count = 0;

  LossBreakdown breakdown() const {
    LossBreakdown b;
    b.total = total.item();
    for (const auto& [n, t] : components) b.components[n] = t.item();
    b.weights = weights;
    b.token_count = token_count;
    return b;
  }
};

/// Quantities held fixed across re-evaluations of the VAT objective.
struct VatFrozen {
  Tensor src_delta;
  Tensor tgt_delta;
  std::optional<ProbSequence> clean_target;  // constant left-hand side when unidirectional
};

struct LossContext {
  std::uint64_t seed = 0;
  Mode mode = Mode::kTrain;
  double unirep_keep = 1.0;              // p'_t for the current epoch
  const VatFrozen* vat_frozen = nullptr;
  const Tensor* clean_probe = nullptr;   // added to the clean pass's source token embeddings
};

// ---------------------------------------------------------------------------
// Building blocks

/// Token-mean label-smoothed CE: -sum_v q_v log p_v with q_target = 1-eps and
/// eps/(V-1) on every other type; pad positions are excluded.
inline Tensor ce_label_smoothed(const ProbSequence& dist, std::span<const int> targets, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw Error("ce_label_smoothed: eps must lie in [0,1)");
  const std::size_t n = dist.positions(), vocab = dist.vocab();
  if (targets.size() != n) throw Error("ce_label_smoothed: target count differs from positions");
  const std::size_t count = dist.valid_count();
  if (count == 0) throw Error("ce_label_smoothed: no target positions");
  const double other = vocab > 1 ? eps / static_cast<double>(vocab - 1) : 0.0;
  const double on_target = 1.0 - eps - other;
  std::vector<int> index(targets.begin(), targets.end());
  std::vector<double> w_target(n, 0.0), w_row(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!dist.valid[i]) {
      index[i] = 0;
      continue;
    }
    w_target[i] = -on_target / static_cast<double>(count);
    w_row[i] = -other / static_cast<double>(count);
  }
  Tensor loss = weighted_sum(pick(dist.log_probs, index), std::move(w_target));
  if (other != 0.0) loss = add(loss, weighted_sum(sum_last_axis(dist.log_probs), std::move(w_row)));
  return loss;
}

/// Token-level KL(p || q) averaged over positions valid in p.
inline Tensor kl_seq(const ProbSequence& p, const ProbSequence& q) {
  if (p.probs.shape() != q.probs.shape())
    detail::shape_error("kl_seq", p.probs, q.probs, "distribution shapes differ");
  const std::size_t count = p.valid_count();
  if (count == 0) throw Error("kl_seq: no valid positions");
  std::vector<double> w(p.positions(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (p.valid[i]) w[i] = 1.0 / static_cast<double>(count);
  Tensor per_row = sum_last_axis(mul(p.probs, sub(p.log_probs, q.log_probs)));
  return weighted_sum(per_row, std::move(w));
}

inline ProbSequence detach(const ProbSequence& d) {
  return {stop_gradient(d.probs), stop_gradient(d.log_probs), d.valid};
}

/// Mean-anchored consistency of Token Cutoff: the average over all given
/// distributions of KL(f_i || p_avg), p_avg being their arithmetic mean.
inline Tensor token_cutoff_kl(std::span<const ProbSequence> dists) {
  if (dists.empty()) throw Error("token_cutoff_kl: no distributions");
  const double inv = 1.0 / static_cast<double>(dists.size());
  Tensor acc = dists[0].probs;
  for (std::size_t i = 1; i < dists.size(); ++i) acc = add(acc, dists[i].probs);
  const ProbSequence avg = ProbSequence::from_probabilities(scale(acc, inv), dists[0].valid);
  Tensor total = kl_seq(dists[0], avg);
  for (std::size_t i = 1; i < dists.size(); ++i) total = add(total, kl_seq(dists[i], avg));
  return scale(total, inv);
}

inline std::uint64_t pass_dropout_seed(std::uint64_t seed, std::size_t pass) {
  return derive_seed(seed, "dropout", pass);
}
inline std::uint64_t pass_mask_seed(std::uint64_t seed, std::size_t pass) {
  return derive_seed(seed, "mask", pass);
}

struct ZeroMasks {
  ByteMask src;
  ByteMask tgt;
};

/// Source then decoder-input masks drawn from one stream.
inline ZeroMasks sample_batch_masks(const Batch& batch, const ZeroMaskSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  ZeroMasks m;
  m.src = sample_zero_mask(batch.src, spec, rng);
  m.tgt = sample_zero_mask(batch.dec_in, spec, rng);
  return m;
}

/// One forward pass with dropout drawn from `dropout_seed`.
inline ForwardResult run_pass(const ModelParams& params, const Batch& batch, Mode mode, std::uint64_t dropout_seed,
                              const ZeroMasks* masks = nullptr, const Tensor* src_offset = nullptr,
                              const Tensor* tgt_offset = nullptr) {
  Rng rng(dropout_seed);
  ForwardOptions opt;
  opt.mode = mode;
  opt.dropout_rng = &rng;
  if (masks) {
    opt.src_zero = &masks->src;
    opt.tgt_zero = &masks->tgt;
  }
  opt.src_offset = src_offset;
  opt.tgt_offset = tgt_offset;
  return forward(params, batch, opt);
}

namespace detail {

inline LossResult finish(std::vector<std::pair<std::string, Tensor>> terms,
                         std::vector<std::pair<std::string, double>> weights, std::size_t tokens) {
  LossResult r;
  r.token_count = tokens;
  Tensor total;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& [name, t] = terms[i];
    const double w = weights[i].second;
    Tensor term = w == 1.0 ? t : scale(t, w);
    total = total.defined() ? add(total, term) : term;
    r.components.emplace(name, t);
    r.weights.emplace(name, w);
  }
  r.total = total;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Objectives

inline LossResult loss_ce(const ModelParams& params, const Batch& batch, const LossWeights& w,
                          const LossContext& ctx) {
  auto clean = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
  return detail::finish({{"ce", ce_label_smoothed(clean.dist, batch.target, w.label_smoothing)}}, {{"ce", 1.0}},
                        batch.token_count);
}

/// L_ce(clean) + alpha * KL(clean || cutoff); one cutoff sample with fresh
/// masks on source and decoder-input embeddings and its own dropout.
inline LossResult loss_simcut(const ModelParams& params, const Batch& batch, const LossWeights& w,
                              const LossContext& ctx, bool bidirectional = true) {
  auto clean = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
  const ZeroMasks masks = sample_batch_masks(batch, ZeroMaskSpec::cutoff(w.p_cut), pass_mask_seed(ctx.seed, 1));
  auto cut = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 1), &masks);
  Tensor ce = ce_label_smoothed(clean.dist, batch.target, w.label_smoothing);
  Tensor kl = kl_seq(bidirectional ? clean.dist : detach(clean.dist), cut.dist);
  return detail::finish({{"ce", ce}, {"simkl", kl}}, {{"ce", 1.0}, {"simkl", w.alpha}}, batch.token_count);
}

/// L_ce + alpha * mean CE over N cutoff samples + beta * mean-anchored KL.
inline LossResult loss_token_cutoff(const ModelParams& params, const Batch& batch, const LossWeights& w,
                                    const LossContext& ctx) {
  if (w.n_cutoff < 1) throw Error("loss_token_cutoff: n_cutoff must be at least 1");
  auto clean = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
  std::vector<ProbSequence> dists{clean.dist};
  Tensor cut_sum;
  for (std::size_t i = 1; i <= w.n_cutoff; ++i) {
    const ZeroMasks masks = sample_batch_masks(batch, ZeroMaskSpec::cutoff(w.p_cut), pass_mask_seed(ctx.seed, i));
    auto cut = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, i), &masks);
    Tensor ce_i = ce_label_smoothed(cut.dist, batch.target, w.label_smoothing);
    cut_sum = cut_sum.defined() ? add(cut_sum, ce_i) : ce_i;
    dists.push_back(cut.dist);
  }
  Tensor ce = ce_label_smoothed(clean.dist, batch.target, w.label_smoothing);
  Tensor cut = scale(cut_sum, 1.0 / static_cast<double>(w.n_cutoff));
  Tensor kl = token_cutoff_kl(dists);
  return detail::finish({{"ce", ce}, {"cut", cut}, {"kl", kl}}, {{"ce", 1.0}, {"cut", w.alpha}, {"kl", w.beta}},
                        batch.token_count);
}

/// Two independent-dropout passes: mean CE + alpha * symmetric KL / 2.
inline LossResult loss_rdrop(const ModelParams& params, const Batch& batch, const LossWeights& w,
                             const LossContext& ctx) {
  auto a = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
  auto b = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 1));
  Tensor ce = scale(add(ce_label_smoothed(a.dist, batch.target, w.label_smoothing),
                        ce_label_smoothed(b.dist, batch.target, w.label_smoothing)),
                    0.5);
  Tensor kl = scale(add(kl_seq(a.dist, b.dist), kl_seq(b.dist, a.dist)), 0.5);
  return detail::finish({{"ce", ce}, {"rdrop_kl", kl}}, {{"ce", 1.0}, {"rdrop_kl", w.alpha}}, batch.token_count);
}

/// Scales per-sentence gradients of the token embeddings to L2 norm epsilon,
/// the norm taken jointly over the sentence's source and target rows. A zero
/// gradient yields a zero perturbation.
inline std::pair<Tensor, Tensor> normalize_perturbation(const Batch& batch, std::size_t d,
                                                        const std::vector<double>& g_src,
                                                        const std::vector<double>& g_tgt, double epsilon) {
  std::vector<double> ds(g_src.size(), 0.0), dt(g_tgt.size(), 0.0);
  const std::size_t sw = batch.src_width * d, tw = batch.tgt_width * d;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < sw; ++i) sq += g_src[r * sw + i] * g_src[r * sw + i];
    for (std::size_t i = 0; i < tw; ++i) sq += g_tgt[r * tw + i] * g_tgt[r * tw + i];
    const double norm = std::sqrt(sq);
    if (norm == 0.0) continue;
    const double f = epsilon / norm;
    for (std::size_t i = 0; i < sw; ++i) ds[r * sw + i] = f * g_src[r * sw + i];
    for (std::size_t i = 0; i < tw; ++i) dt[r * tw + i] = f * g_tgt[r * tw + i];
  }
  return {Tensor::from({batch.rows * batch.src_width, d}, std::move(ds)),
          Tensor::from({batch.rows * batch.tgt_width, d}, std::move(dt))};
}

/// Computes the one-step adversarial perturbation (and, for the
/// unidirectional variant, the constant clean distribution) at the current
/// parameters, so a VAT loss can be re-evaluated with them held fixed.
inline VatFrozen vat_freeze(const ModelParams& params, const Batch& batch, const LossWeights& w,
                            const VatSpec& spec, const LossContext& ctx) {
  auto clean = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
  Tensor ce = ce_label_smoothed(clean.dist, batch.target, w.label_smoothing);
  const std::vector<Tensor> wrt{clean.src_tokens, clean.tgt_tokens};
  auto g = gradients(ce, wrt);
  VatFrozen f;
  std::tie(f.src_delta, f.tgt_delta) =
      normalize_perturbation(batch, params.config().d_model, g[0], g[1], spec.epsilon);
  if (!spec.bidirectional) f.clean_target = detach(clean.dist);
  return f;
}

/// L_ce + alpha * KL(clean || perturbed). The perturbed pass reuses the clean
/// pass's dropout stream so the KL isolates the embedding perturbation. When
/// unidirectional, the clean side of the KL is a constant.
inline LossResult loss_vat(const ModelParams& params, const Batch& batch, const LossWeights& w,
                           const VatSpec& spec, const LossContext& ctx) {
  if (!(spec.epsilon > 0.0)) throw Error("loss_vat: epsilon must be positive");
  const std::uint64_t dropout_seed = pass_dropout_seed(ctx.seed, 0);
  auto clean = run_pass(params, batch, ctx.mode, dropout_seed, nullptr, ctx.clean_probe);
  Tensor ce = ce_label_smoothed(clean.dist, batch.target, w.label_smoothing);
  Tensor src_delta, tgt_delta;
  if (ctx.vat_frozen) {
    src_delta = ctx.vat_frozen->src_delta;
    tgt_delta = ctx.vat_frozen->tgt_delta;
  } else {
    const std::vector<Tensor> wrt{clean.src_tokens, clean.tgt_tokens};
    auto g = gradients(ce, wrt);
    std::tie(src_delta, tgt_delta) = normalize_perturbation(batch, params.config().d_model, g[0], g[1], spec.epsilon);
  }
  auto perturbed = run_pass(params, batch, ctx.mode, dropout_seed, nullptr, &src_delta, &tgt_delta);
  ProbSequence left = clean.dist;
  if (!spec.bidirectional)
    left = ctx.vat_frozen && ctx.vat_frozen->clean_target ? *ctx.vat_frozen->clean_target : detach(clean.dist);
  Tensor kl = kl_seq(left, perturbed.dist);
  return detail::finish({{"ce", ce}, {"vat_kl", kl}}, {{"ce", 1.0}, {"vat_kl", w.alpha}}, batch.token_count);
}

/// Copy of `batch` whose source and decoder-input tokens are resampled with
/// probability 1 - keep; labels stay untouched.
inline Batch unirep_batch(const Batch& batch, double keep, std::size_t vocab_size, Rng& rng) {
  Batch out = batch;
  resample_tokens(out.src, 1.0 - keep, vocab_size, rng);
  resample_tokens(out.dec_in, 1.0 - keep, vocab_size, rng);
  return out;
}

/// Plain CE over a perturbed view of the batch: UniRep token replacement with
/// keep probability ctx.unirep_keep, or WordDrop embedding zeroing.
inline LossResult loss_baseline_perturbed(const ModelParams& params, const Batch& batch, const ObjectiveSpec& spec,
                                          const LossContext& ctx) {
  const double eps = spec.weights.label_smoothing;
  if (spec.kind == ObjectiveKind::kUniRep) {
    Rng rng(pass_mask_seed(ctx.seed, 0));
    const Batch noisy = unirep_batch(batch, ctx.unirep_keep, params.config().vocab_size, rng);
    auto pass = run_pass(params, noisy, ctx.mode, pass_dropout_seed(ctx.seed, 0), nullptr, ctx.clean_probe);
    return detail::finish({{"ce", ce_label_smoothed(pass.dist, batch.target, eps)}}, {{"ce", 1.0}},
                          batch.token_count);
  }
  if (spec.kind == ObjectiveKind::kWordDrop) {
    const ZeroMasks masks =
        sample_batch_masks(batch, ZeroMaskSpec::word_drop(spec.worddrop_keep), pass_mask_seed(ctx.seed, 0));
    auto pass = run_pass(params, batch, ctx.mode, pass_dropout_seed(ctx.seed, 0), &masks, ctx.clean_probe);
    return detail::finish({{"ce", ce_label_smoothed(pass.dist, batch.target, eps)}}, {{"ce", 1.0}},
                          batch.token_count);
  }
  throw Error("loss_baseline_perturbed: objective must be unirep or worddrop");
}

inline LossResult compute_loss(const ObjectiveSpec& spec, const ModelParams& params, const Batch& batch,
                               const LossContext& ctx) {
  switch (spec.kind) {
    case ObjectiveKind::kCe: return loss_ce(params, batch, spec.weights, ctx);
    case ObjectiveKind::kSimCut: return loss_simcut(params, batch, spec.weights, ctx, spec.simcut_bidirectional);
    case ObjectiveKind::kTokenCutoff: return loss_token_cutoff(params, batch, spec.weights, ctx);
    case ObjectiveKind::kRDrop: return loss_rdrop(params, batch, spec.weights, ctx);
    case ObjectiveKind::kVat: return loss_vat(params, batch, spec.weights, spec.vat, ctx);
    case ObjectiveKind::kUniRep:
    case ObjectiveKind::kWordDrop: return loss_baseline_perturbed(params, batch, spec, ctx);
  }
  throw Error("compute_loss: unhandled objective");
}

}  // namespace simcut
