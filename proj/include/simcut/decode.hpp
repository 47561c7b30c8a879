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

// Beam search, batched greedy decoding, corpus BLEU and the perturbed-source
// robustness sweep.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"
#include "simcut/text.hpp"
#include "simcut/transformer.hpp"

namespace simcut {

struct DecodeConfig {
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_len = 0;  // 0: 2 * source length + 10
  std::vector<int> banned{Vocabulary::kPad, Vocabulary::kBos};
  int eos = Vocabulary::kEos;

  std::size_t max_len_for(std::size_t src_len) const {
    return max_len > 0 ? max_len : 2 * src_len + 10;
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // includes the final eos when finished
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
};

inline double normalized_score(double log_prob, std::size_t length, double length_penalty) {
  return log_prob / std::pow(static_cast<double>(length), length_penalty);
}

namespace detail {

inline bool is_banned(const DecodeConfig& cfg, int v) {
  return std::find(cfg.banned.begin(), cfg.banned.end(), v) != cfg.banned.end();
}

}  // namespace detail

/// Beam search over a next-token scorer. `scorer(prefixes)` receives the
/// active prefixes (all of equal length, bos excluded) and returns one row of
/// log-probabilities over the vocabulary per prefix. An eos candidate is
/// finalized only when it ranks within the top beam_size candidates of its
/// step. Search stops once beam_size hypotheses are finished or max_len steps
/// were taken; unfinished hypotheses are then finalized as they stand. Ties
/// are broken by token-id order.
template <class Scorer>
std::vector<Hypothesis> beam_search(Scorer&& scorer, std::size_t max_len, const DecodeConfig& cfg) {
  if (cfg.beam_size == 0) throw Error("beam_search: beam size must be positive");
  if (max_len == 0) throw Error("beam_search: max_len must be positive");
  struct Candidate {
    double log_prob;
    std::size_t parent;
    int token;
  };
  std::vector<Hypothesis> active{Hypothesis{}}, finished;
  for (std::size_t step = 1; step <= max_len; ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(active.size());
    for (const auto& h : active) prefixes.push_back(h.tokens);
    const std::vector<std::vector<double>> rows = scorer(prefixes);
    if (rows.size() != active.size()) throw Error("beam_search: scorer returned wrong row count");
    std::vector<Candidate> cands;
    for (std::size_t a = 0; a < active.size(); ++a)
      for (std::size_t v = 0; v < rows[a].size(); ++v) {
        if (detail::is_banned(cfg, static_cast<int>(v))) continue;
        cands.push_back({active[a].log_prob + rows[a][v], a, static_cast<int>(v)});
      }
    std::sort(cands.begin(), cands.end(), [&](const Candidate& x, const Candidate& y) {
      if (x.log_prob != y.log_prob) return x.log_prob > y.log_prob;
      if (x.parent != y.parent) return active[x.parent].tokens < active[y.parent].tokens;
      return x.token < y.token;
    });
    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < cfg.beam_size; ++rank) {
      const auto& c = cands[rank];
      Hypothesis h{active[c.parent].tokens, c.log_prob, 0.0, false};
      h.tokens.push_back(c.token);
      if (c.token == cfg.eos) {
        if (rank < cfg.beam_size) {
          h.finished = true;
          h.score = normalized_score(h.log_prob, step, cfg.length_penalty);
          finished.push_back(std::move(h));
        }
        continue;
      }
      next.push_back(std::move(h));
    }
    if (finished.size() >= cfg.beam_size) break;
    if (step == max_len) {
      for (auto& h : next) {
        h.score = normalized_score(h.log_prob, step, cfg.length_penalty);
        finished.push_back(std::move(h));
      }
      break;
    }
    if (next.empty()) break;
    active = std::move(next);
  }
  std::stable_sort(finished.begin(), finished.end(), [](const Hypothesis& x, const Hypothesis& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.tokens < y.tokens;
  });
  if (finished.size() > cfg.beam_size) finished.resize(cfg.beam_size);
  return finished;
}

/// Next-token scorer for one source sentence under a trained model.
class TransformerScorer {
 public:
  TransformerScorer(const ModelParams& params, std::span<const int> src) : params_(params) {
    NoGradGuard guard;
    enc_ = encode_source(params, src, 1, src.size());
  }

  std::vector<std::vector<double>> operator()(const std::vector<std::vector<int>>& prefixes) const {
    NoGradGuard guard;
    const std::size_t rows = prefixes.size(), width = prefixes.front().size() + 1;
    std::vector<int> dec_in;
    dec_in.reserve(rows * width);
    for (const auto& p : prefixes) {
      if (p.size() + 1 != width) throw Error("TransformerScorer: prefixes differ in length");
      dec_in.push_back(Vocabulary::kBos);
      dec_in.insert(dec_in.end(), p.begin(), p.end());
    }
    const std::vector<std::size_t> pick(rows, 0);
    const EncoderOutput enc = enc_.select_rows(pick);
    const Tensor logits = decode_logits(params_, enc, dec_in, width);
    const std::size_t vocab = logits.dim(1);
    std::vector<double> last(rows * vocab);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = logits.values().subspan((r * width + width - 1) * vocab, vocab);
      std::copy(row.begin(), row.end(), last.begin() + static_cast<std::ptrdiff_t>(r * vocab));
    }
    const Tensor lp = log_softmax(Tensor::from({rows, vocab}, std::move(last)));
    std::vector<std::vector<double>> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = lp.values().subspan(r * vocab, vocab);
      out[r].assign(row.begin(), row.end());
    }
    return out;
  }

 private:
  const ModelParams& params_;
  EncoderOutput enc_;
};

/// Best beam hypothesis for `src` (ids ending in eos).
inline Hypothesis beam_decode(const ModelParams& params, std::span<const int> src, const DecodeConfig& cfg) {
  if (src.empty()) throw Error("beam_decode: empty source");
  TransformerScorer scorer(params, src);
  auto hyps = beam_search(scorer, cfg.max_len_for(src.size()), cfg);
  return hyps.front();
}

/// Greedy decoding of many sources at once. Each row picks the arg-max
/// non-banned token (lowest id on ties) until eos or its length limit.
inline std::vector<Hypothesis> greedy_decode(const ModelParams& params,
                                             std::span<const std::vector<int>> sources,
                                             const DecodeConfig& cfg, std::size_t max_batch_rows = 64) {
  NoGradGuard guard;
  std::vector<Hypothesis> out(sources.size());
  for (std::size_t begin = 0; begin < sources.size(); begin += max_batch_rows) {
    const std::size_t end = std::min(sources.size(), begin + max_batch_rows);
    const std::size_t rows = end - begin;
    std::size_t width = 0, limit = 0;
    std::vector<std::size_t> row_limit(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      width = std::max(width, sources[begin + r].size());
      row_limit[r] = cfg.max_len_for(sources[begin + r].size());
      limit = std::max(limit, row_limit[r]);
    }
    std::vector<int> src(rows * width, Vocabulary::kPad);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(sources[begin + r].begin(), sources[begin + r].end(),
                src.begin() + static_cast<std::ptrdiff_t>(r * width));
    const EncoderOutput enc_all = encode_source(params, src, rows, width);
    std::vector<std::size_t> live(rows);
    for (std::size_t r = 0; r < rows; ++r) live[r] = r;
    for (std::size_t step = 1; step <= limit && !live.empty(); ++step) {
      const EncoderOutput enc = enc_all.select_rows(live);
      std::vector<int> dec_in;
      dec_in.reserve(live.size() * step);
      for (std::size_t r : live) {
        dec_in.push_back(Vocabulary::kBos);
        const auto& t = out[begin + r].tokens;
        dec_in.insert(dec_in.end(), t.begin(), t.end());
      }
      const Tensor logits = decode_logits(params, enc, dec_in, step);
      const std::size_t vocab = logits.dim(1);
      std::vector<double> last(live.size() * vocab);
      for (std::size_t i = 0; i < live.size(); ++i) {
        const auto row = logits.values().subspan((i * step + step - 1) * vocab, vocab);
        std::copy(row.begin(), row.end(), last.begin() + static_cast<std::ptrdiff_t>(i * vocab));
      }
      const Tensor lp = log_softmax(Tensor::from({live.size(), vocab}, std::move(last)));
      std::vector<std::size_t> still;
      for (std::size_t i = 0; i < live.size(); ++i) {
        const auto row = lp.values().subspan(i * vocab, vocab);
        int best = -1;
        for (std::size_t v = 0; v < vocab; ++v) {
          if (detail::is_banned(cfg, static_cast<int>(v))) continue;
          if (best < 0 || row[v] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
        }
        Hypothesis& h = out[begin + live[i]];
        h.tokens.push_back(best);
        h.log_prob += row[static_cast<std::size_t>(best)];
        if (best == cfg.eos || step >= row_limit[live[i]]) {
          h.finished = best == cfg.eos;
          h.score = normalized_score(h.log_prob, step, cfg.length_penalty);
        } else {
          still.push_back(live[i]);
        }
      }
      live = std::move(still);
    }
  }
  return out;
}

/// Decoded tokens without the trailing eos.
inline std::vector<int> strip_eos(std::vector<int> tokens) {
  if (!tokens.empty() && tokens.back() == Vocabulary::kEos) tokens.pop_back();
  return tokens;
}

/// Translates id sequences to detokenized text, with beam search or (when
/// `greedy`) batched greedy decoding.
inline std::vector<std::string> translate(const ModelParams& params, std::span<const std::vector<int>> sources,
                                          const Vocabulary& vocab, const DecodeConfig& cfg, bool greedy = false) {
  std::vector<std::string> out;
  out.reserve(sources.size());
  if (greedy) {
    for (const auto& h : greedy_decode(params, sources, cfg)) out.push_back(decode(strip_eos(h.tokens), vocab));
  } else {
    for (const auto& s : sources) out.push_back(decode(strip_eos(beam_decode(params, s, cfg).tokens), vocab));
  }
  return out;
}

// ---------------------------------------------------------------------------
// BLEU

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

/// Corpus BLEU, single reference, clipped 1..4-gram precisions, geometric
/// mean, brevity penalty, no smoothing: any zero precision gives 0.
template <class Token>
BleuReport corpus_bleu(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs) {
  if (hyps.size() != refs.size()) throw Error("corpus_bleu: hypothesis and reference counts differ");
  BleuReport r;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& ref = refs[s];
    r.hyp_length += h.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<Token>, std::size_t> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<Token>(ref.begin() + i, ref.begin() + i + n)];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<Token>(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(c, it->second);
        r.totals[n - 1] += c;
      }
    }
  }
  double log_sum = 0.0;
  bool zero = r.hyp_length == 0;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
    if (r.precisions[n] == 0.0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  if (r.hyp_length == 0) r.brevity_penalty = 0.0;
  else if (r.hyp_length >= r.ref_length) r.brevity_penalty = 1.0;
  else r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

/// Word-level BLEU of detokenized lines.
inline BleuReport corpus_bleu_text(std::span<const std::string> hyps, std::span<const std::string> refs) {
  std::vector<std::vector<std::string>> h, r;
  for (const auto& s : hyps) h.push_back(split_whitespace(s));
  for (const auto& s : refs) r.push_back(split_whitespace(s));
  return corpus_bleu(h, r);
}

// ---------------------------------------------------------------------------
// Robustness under source noise

/// Replaces each non-special source token with probability `prob` by a token
/// drawn uniformly from the non-special vocabulary.
inline std::vector<std::vector<int>> perturb_source(std::span<const std::vector<int>> sources, double prob,
                                                    std::size_t vocab_size, Rng& rng) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw Error("perturb_source: probability must lie in [0,1]");
  std::vector<std::vector<int>> out(sources.begin(), sources.end());
  for (auto& s : out) resample_tokens(s, prob, vocab_size, rng);
  return out;
}

struct RobustnessRow {
  double probability = 0.0;
  double bleu = 0.0;
};

/// BLEU against the references for each perturbation probability. Noise for
/// sweep point i comes from derive_seed(seed, "perturb", i).
inline std::vector<RobustnessRow> robustness_eval(const ModelParams& params, std::span<const SentencePair> test,
                                                  std::span<const double> probabilities, const Vocabulary& vocab,
                                                  const DecodeConfig& cfg, std::uint64_t seed, bool greedy = false) {
  std::vector<std::vector<int>> sources;
  std::vector<std::string> refs;
  for (const auto& p : test) {
    sources.push_back(p.src);
    refs.push_back(decode(strip_eos(p.tgt), vocab));
  }
  std::vector<RobustnessRow> rows;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    Rng rng(derive_seed(seed, "perturb", i));
    const auto noisy = perturb_source(sources, probabilities[i], vocab.size(), rng);
    const auto hyps = translate(params, noisy, vocab, cfg, greedy);
    rows.push_back({probabilities[i], corpus_bleu_text(hyps, refs).bleu});
  }
  return rows;
}

/// Tab-separated table; `header` becomes a leading '#' metadata line.
inline void write_robustness_table(const std::string& path, std::span<const RobustnessRow> rows,
                                   const std::string& header = "") {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  if (!header.empty()) out << "# " << header << '\n';
  out << "probability\tbleu\n";
  for (const auto& r : rows) out << r.probability << '\t' << r.bleu << '\n';
}

}  // namespace simcut
