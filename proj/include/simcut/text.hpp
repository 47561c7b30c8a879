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

// Vocabulary and BPE segmentation, parallel-corpus handling, token-count
// batching, and the token-level perturbation samplers (zero masks, uniform
// token replacement).

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"

namespace simcut {

// ---------------------------------------------------------------------------
// Vocabulary

/// Marks a subword piece that is continued by the next piece of the same word.
inline constexpr std::string_view kContinuation = "@@";

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Builds a vocabulary from non-special tokens; specials take ids 0..3.
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) append(s);
    for (const auto& t : tokens) {
      if (id_of_.contains(t)) throw Error("Vocabulary: duplicate token '" + t + "'");
      append(t);
    }
  }

  std::size_t size() const { return token_of_.size(); }

  int id(std::string_view token) const {
    auto it = id_of_.find(std::string(token));
    return it == id_of_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return id_of_.contains(std::string(token)); }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= token_of_.size())
      throw Error("Vocabulary: id " + std::to_string(id) + " out of range");
    return token_of_[static_cast<std::size_t>(id)];
  }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

  const std::vector<std::string>& tokens() const { return token_of_; }

  /// Order-sensitive 64-bit fingerprint used to detect checkpoint/vocab mismatch.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : token_of_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      h ^= 0xff;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary file " + path);
    for (const auto& t : token_of_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read vocabulary file " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    const std::vector<std::string> expected{"<pad>", "<bos>", "<eos>", "<unk>"};
    if (lines.size() < expected.size() || !std::equal(expected.begin(), expected.end(), lines.begin()))
      throw Error("vocabulary file " + path + " must start with <pad>, <bos>, <eos>, <unk>");
    return Vocabulary(std::vector<std::string>(lines.begin() + kNumSpecial, lines.end()));
  }

 private:
  void append(const std::string& t) {
    id_of_.emplace(t, static_cast<int>(token_of_.size()));
    token_of_.push_back(t);
  }

  std::unordered_map<std::string, int> id_of_;
  std::vector<std::string> token_of_;
};

// ---------------------------------------------------------------------------
// Text normalization

/// ASCII lowercasing plus whitespace collapsing; non-ASCII bytes pass through.
inline std::string normalize_line(std::string_view line) {
  std::string out;
  out.reserve(line.size());
  bool pending_space = false;
  for (char ch : line) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) && c < 0x80) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> words;
  std::istringstream is{std::string(line)};
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

/// Splits a UTF-8 string into code points (malformed bytes become singletons).
inline std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if ((c & 0xE0) == 0xC0)
      len = 2;
    else if ((c & 0xF0) == 0xE0)
      len = 3;
    else if ((c & 0xF8) == 0xF0)
      len = 4;
    if (i + len > word.size()) len = 1;
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BPE

struct MergeRule {
  std::string left;
  std::string right;
  bool operator==(const MergeRule&) const = default;
};

class MergeTable {
 public:
  MergeTable() = default;
  explicit MergeTable(std::vector<MergeRule> rules) : rules_(std::move(rules)) {
    for (std::size_t r = 0; r < rules_.size(); ++r)
      rank_.emplace(key(rules_[r].left, rules_[r].right), r);
  }

  const std::vector<MergeRule>& rules() const { return rules_; }
  std::size_t size() const { return rules_.size(); }

  /// Segments one word into symbols by applying merges in rank order.
  std::vector<std::string> segment(std::string_view word) const {
    std::vector<std::string> symbols = utf8_chars(word);
    while (symbols.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = rank_.find(key(symbols[i], symbols[i + 1]));
        if (it != rank_.end()) best_rank = std::min(best_rank, it->second);
      }
      if (best_rank == SIZE_MAX) break;
      const auto& rule = rules_[best_rank];
      std::vector<std::string> merged;
      merged.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == rule.left && symbols[i + 1] == rule.right) {
          merged.push_back(symbols[i] + symbols[i + 1]);
          ++i;
        } else {
          merged.push_back(symbols[i]);
        }
      }
      symbols = std::move(merged);
    }
    return symbols;
  }

  /// Subword tokens for a normalized sentence; non-final pieces carry "@@".
  std::vector<std::string> tokenize(std::string_view sentence) const {
    std::vector<std::string> tokens;
    for (const auto& word : split_whitespace(sentence)) {
      auto pieces = segment(word);
      for (std::size_t i = 0; i < pieces.size(); ++i)
        tokens.push_back(i + 1 < pieces.size() ? pieces[i] + std::string(kContinuation) : pieces[i]);
    }
    return tokens;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write merge file " + path);
    for (const auto& r : rules_) out << r.left << ' ' << r.right << '\n';
  }

  static MergeTable load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read merge file " + path);
    std::vector<MergeRule> rules;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto words = split_whitespace(line);
      if (words.size() != 2)
        throw Error("merge file " + path + " line " + std::to_string(lineno) + ": expected 'left right'");
      rules.push_back({words[0], words[1]});
    }
    return MergeTable(std::move(rules));
  }

 private:
  static std::string key(const std::string& a, const std::string& b) {
    std::string k = a;
    k.push_back('\x1f');
    k += b;
    return k;
  }

  std::vector<MergeRule> rules_;
  std::unordered_map<std::string, std::size_t> rank_;
};

/// Greedy most-frequent-pair merging over whitespace-separated words. Ties
/// are broken by the lexicographically smallest (left, right) pair. Stops
/// early when no adjacent pair remains.
inline MergeTable train_bpe(std::span<const std::string> corpus, std::size_t num_merges) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& line : corpus)
    for (const auto& w : split_whitespace(line)) ++word_counts[w];
  if (word_counts.empty()) throw Error("train_bpe: corpus contains no words");

  struct Word {
    std::vector<std::string> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, c] : word_counts) words.push_back({utf8_chars(w), c});

  std::vector<MergeRule> rules;
  for (std::size_t m = 0; m < num_merges; ++m) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i)
        pairs[{w.symbols[i], w.symbols[i + 1]}] += w.count;
    if (pairs.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    rules.push_back({left, right});
    for (auto& w : words) {
      std::vector<std::string> merged;
      merged.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          merged.push_back(left + right);
          ++i;
        } else {
          merged.push_back(w.symbols[i]);
        }
      }
      w.symbols = std::move(merged);
    }
  }
  return MergeTable(std::move(rules));
}

/// Vocabulary of every subword token produced on the corpus, ordered by
/// descending frequency then lexicographically.
inline Vocabulary build_vocabulary(std::span<const std::string> corpus, const MergeTable& merges) {
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& t : merges.tokenize(line)) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(items.size());
  for (auto& [t, c] : items) tokens.push_back(t);
  return Vocabulary(tokens);
}

inline std::vector<int> encode(std::string_view text, const MergeTable& merges, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& t : merges.tokenize(text)) ids.push_back(vocab.id(t));
  return ids;
}

/// Joins subword tokens back into words. Specials other than unk are dropped.
inline std::string decode(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  bool glue = false;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    std::string t = vocab.token(id);
    if (!out.empty() && !glue) out.push_back(' ');
    glue = t.size() >= kContinuation.size() && t.ends_with(kContinuation);
    if (glue) t.resize(t.size() - kContinuation.size());
    out += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallel data

enum class Direction { kForward, kReversed };

struct SentencePair {
  std::vector<int> src;  // ends with eos
  std::vector<int> tgt;  // ends with eos
  Direction direction = Direction::kForward;
  bool operator==(const SentencePair&) const = default;
};

struct RawPair {
  std::string src;
  std::string tgt;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

/// Two aligned files. Lines are normalized; pairs with a blank side are dropped.
inline std::vector<RawPair> read_parallel(const std::string& src_path, const std::string& tgt_path) {
  auto src = read_lines(src_path);
  auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size())
    throw Error("parallel files differ in length: " + src_path + " has " + std::to_string(src.size()) +
                " lines, " + tgt_path + " has " + std::to_string(tgt.size()));
  std::vector<RawPair> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = normalize_line(src[i]);
    auto t = normalize_line(tgt[i]);
    if (s.empty() || t.empty()) continue;
    out.push_back({std::move(s), std::move(t)});
  }
  return out;
}

/// One "source<TAB>target" pair per line.
inline std::vector<RawPair> read_tsv(const std::string& path) {
  std::vector<RawPair> out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (normalize_line(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error(path + " line " + std::to_string(lineno) + ": missing tab separator");
    auto s = normalize_line(std::string_view(line).substr(0, tab));
    auto t = normalize_line(std::string_view(line).substr(tab + 1));
    if (s.empty() || t.empty()) continue;
    out.push_back({std::move(s), std::move(t)});
  }
  return out;
}

inline SentencePair encode_pair(const RawPair& raw, const MergeTable& merges, const Vocabulary& vocab) {
  SentencePair p;
  p.src = encode(raw.src, merges, vocab);
  p.src.push_back(Vocabulary::kEos);
  p.tgt = encode(raw.tgt, merges, vocab);
  p.tgt.push_back(Vocabulary::kEos);
  return p;
}

inline std::vector<SentencePair> encode_pairs(std::span<const RawPair> raw, const MergeTable& merges,
                                              const Vocabulary& vocab) {
  std::vector<SentencePair> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(encode_pair(r, merges, vocab));
  return out;
}

/// Direction-tag token ids prepended to the source side, when enabled.
struct DirectionTags {
  int forward = -1;
  int reversed = -1;
};

/// Forward pairs followed by their swapped copies. Both sides already end in
/// eos, so swapping keeps every target eos-terminated.
inline std::vector<SentencePair> make_bidirectional(std::span<const SentencePair> pairs,
                                                    std::optional<DirectionTags> tags = std::nullopt) {
  auto ensure_eos = [](std::vector<int> ids) {
    if (ids.empty() || ids.back() != Vocabulary::kEos) ids.push_back(Vocabulary::kEos);
    return ids;
  };
  std::vector<SentencePair> out;
  out.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    SentencePair fwd{p.src, ensure_eos(p.tgt), Direction::kForward};
    if (tags) fwd.src.insert(fwd.src.begin(), tags->forward);
    out.push_back(std::move(fwd));
  }
  for (const auto& p : pairs) {
    SentencePair rev{ensure_eos(p.tgt), ensure_eos(p.src), Direction::kReversed};
    if (tags) rev.src.insert(rev.src.begin(), tags->reversed);
    out.push_back(std::move(rev));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

/// Padded source / decoder-input / label matrices, row-major [rows, width].
struct Batch {
  std::size_t rows = 0;
  std::size_t src_width = 0;
  std::size_t tgt_width = 0;
  std::vector<int> src;      // x, pad-filled
  std::vector<int> dec_in;   // bos, y_1 .. y_{J-1}
  std::vector<int> target;   // y_1 .. y_J
  std::vector<std::size_t> src_len;
  std::vector<std::size_t> tgt_len;
  std::size_t token_count = 0;  // real target positions

  std::size_t padded_tokens() const { return rows * (src_width + tgt_width); }
  bool src_is_pad(std::size_t i) const { return src[i] == Vocabulary::kPad; }
  bool tgt_is_pad(std::size_t i) const { return target[i] == Vocabulary::kPad; }
};

inline Batch make_batch(std::span<const SentencePair> pairs) {
  Batch b;
  b.rows = pairs.size();
  for (const auto& p : pairs) {
    if (p.tgt.empty() || p.tgt.back() != Vocabulary::kEos)
      throw Error("make_batch: target sequence must end with eos");
    b.src_width = std::max(b.src_width, p.src.size());
    b.tgt_width = std::max(b.tgt_width, p.tgt.size());
  }
  b.src.assign(b.rows * b.src_width, Vocabulary::kPad);
  b.dec_in.assign(b.rows * b.tgt_width, Vocabulary::kPad);
  b.target.assign(b.rows * b.tgt_width, Vocabulary::kPad);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& p = pairs[r];
    std::copy(p.src.begin(), p.src.end(), b.src.begin() + static_cast<std::ptrdiff_t>(r * b.src_width));
    b.dec_in[r * b.tgt_width] = Vocabulary::kBos;
    for (std::size_t j = 0; j < p.tgt.size(); ++j) {
      b.target[r * b.tgt_width + j] = p.tgt[j];
      if (j + 1 < p.tgt.size()) b.dec_in[r * b.tgt_width + j + 1] = p.tgt[j];
    }
    b.src_len.push_back(p.src.size());
    b.tgt_len.push_back(p.tgt.size());
    b.token_count += p.tgt.size();
  }
  return b;
}

/// Partitions pairs into batches whose padded token count rows*(max_src+max_tgt)
/// stays within max_tokens. Pairs are shuffled, stably sorted by total length,
/// chunked greedily, and the chunk order is shuffled. Returns index lists.
inline std::vector<std::vector<std::size_t>> batch_indices_by_tokens(std::span<const SentencePair> pairs,
                                                                     std::size_t max_tokens, Rng& rng) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t len = pairs[i].src.size() + pairs[i].tgt.size();
    if (len > max_tokens)
      throw Error("batch_by_tokens: pair " + std::to_string(i) + " has " + std::to_string(len) +
                  " tokens, exceeding max_tokens=" + std::to_string(max_tokens));
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pairs[a].src.size() + pairs[a].tgt.size() < pairs[b].src.size() + pairs[b].tgt.size();
  });
  std::vector<std::vector<std::size_t>> chunks;
  std::vector<std::size_t> current;
  std::size_t max_src = 0, max_tgt = 0;
  for (std::size_t idx : order) {
    const std::size_t s = std::max(max_src, pairs[idx].src.size());
    const std::size_t t = std::max(max_tgt, pairs[idx].tgt.size());
    if (!current.empty() && (current.size() + 1) * (s + t) > max_tokens) {
      chunks.push_back(std::move(current));
      current.clear();
      max_src = max_tgt = 0;
    }
    current.push_back(idx);
    max_src = std::max(max_src, pairs[idx].src.size());
    max_tgt = std::max(max_tgt, pairs[idx].tgt.size());
  }
  if (!current.empty()) chunks.push_back(std::move(current));
  rng.shuffle(chunks);
  return chunks;
}

inline std::vector<Batch> batch_by_tokens(std::span<const SentencePair> pairs, std::size_t max_tokens,
                                          Rng& rng) {
  std::vector<Batch> out;
  for (const auto& chunk : batch_indices_by_tokens(pairs, max_tokens, rng)) {
    std::vector<SentencePair> members;
    members.reserve(chunk.size());
    for (auto i : chunk) members.push_back(pairs[i]);
    out.push_back(make_batch(members));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation samplers

enum class ZeroMaskKind { kCutoff, kWordDrop };

struct ZeroMaskSpec {
  ZeroMaskKind kind = ZeroMaskKind::kCutoff;
  double zero_probability = 0.0;
  bool exclude_special = true;

  static ZeroMaskSpec cutoff(double p_cut) { return {ZeroMaskKind::kCutoff, p_cut, true}; }
  static ZeroMaskSpec word_drop(double keep_probability) {
    return {ZeroMaskKind::kWordDrop, 1.0 - keep_probability, true};
  }
};

/// One byte per position, 1 = zero that token's embedding. Pad positions are
/// never zeroed; with exclude_special, neither are bos/eos/unk. One uniform
/// draw per eligible position, in order.
inline ByteMask sample_zero_mask(std::span<const int> tokens, const ZeroMaskSpec& spec, Rng& rng) {
  if (!(spec.zero_probability >= 0.0 && spec.zero_probability <= 1.0))
    throw Error("sample_zero_mask: zero_probability must lie in [0,1]");
  ByteMask mask(tokens.size(), 0);
  if (spec.zero_probability == 0.0) return mask;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t == Vocabulary::kPad) continue;
    if (spec.exclude_special && Vocabulary::is_special(t)) continue;
    mask[i] = rng.uniform() < spec.zero_probability ? 1 : 0;
  }
  return mask;
}

struct UniRepSchedule {
  double q = 0.9;
  double k = 25.0;
};

/// Keep probability for epoch t under inverse sigmoid decay, floored at q.
inline double unirep_probability(double t, const UniRepSchedule& sched) {
  if (t < 0) throw Error("unirep_probability: epoch must be non-negative");
  if (!(sched.q > 0.0 && sched.q <= 1.0) || !(sched.k > 0.0))
    throw Error("unirep_probability: need q in (0,1] and k > 0");
  return std::max(sched.q, sched.k / (sched.k + std::exp(t / sched.k)));
}

/// Each non-special token is, with probability replace_prob, resampled
/// uniformly from the non-special ids [4, vocab_size). Returns the number of
/// resample decisions taken.
inline std::size_t resample_tokens(std::vector<int>& ids, double replace_prob, std::size_t vocab_size,
                                   Rng& rng) {
  if (!(replace_prob >= 0.0 && replace_prob <= 1.0))
    throw Error("resample_tokens: probability must lie in [0,1]");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumSpecial)) return 0;
  const std::size_t pool = vocab_size - Vocabulary::kNumSpecial;
  std::size_t replaced = 0;
  if (replace_prob == 0.0) return 0;
  for (int& t : ids) {
    if (Vocabulary::is_special(t)) continue;
    if (rng.uniform() < replace_prob) {
      t = Vocabulary::kNumSpecial + static_cast<int>(rng.uniform_int(pool));
      ++replaced;
    }
  }
  return replaced;
}

/// Uniform token replacement on both sides with keep probability p'.
inline SentencePair apply_unirep(const SentencePair& pair, double keep_probability, Rng& rng,
                                 std::size_t vocab_size, std::size_t* replaced = nullptr) {
  if (!(keep_probability >= 0.0 && keep_probability <= 1.0))
    throw Error("apply_unirep: keep probability must lie in [0,1]");
  SentencePair out = pair;
  std::size_t n = resample_tokens(out.src, 1.0 - keep_probability, vocab_size, rng);
  n += resample_tokens(out.tgt, 1.0 - keep_probability, vocab_size, rng);
  if (replaced) *replaced = n;
  return out;
}

}  // namespace simcut
