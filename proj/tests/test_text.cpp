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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "simcut/text.hpp"
#include "support/helpers.hpp"
#include "support/toy_task.hpp"

namespace simcut {
namespace {

using testing::random_pairs;

TEST(Bpe, SingleMergeOnRepeatedPair) {
  const std::vector<std::string> corpus{"ab ab"};
  auto m = train_bpe(corpus, 1);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.rules()[0], (MergeRule{"a", "b"}));
  const std::vector<std::string> corpus2{"aa aa"};
  auto m2 = train_bpe(corpus2, 1);
  ASSERT_EQ(m2.size(), 1u);
  EXPECT_EQ(m2.rules()[0], (MergeRule{"a", "a"}));
}

TEST(Bpe, TiesBreakLexicographically) {
  // (c,d) and (a,b) both occur twice; the smaller pair wins.
  const std::vector<std::string> corpus{"cd ab", "ab cd"};
  auto m = train_bpe(corpus, 1);
  EXPECT_EQ(m.rules()[0], (MergeRule{"a", "b"}));
}

TEST(Bpe, MergesFollowPairFrequency) {
  // Pair counts by hand: (l,o) x3, (o,w) x3, (w,e) x1, (e,r) x1 ...
  const std::vector<std::string> corpus{"low low lower"};
  auto m = train_bpe(corpus, 2);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.rules()[0], (MergeRule{"l", "o"}));
  EXPECT_EQ(m.rules()[1], (MergeRule{"lo", "w"}));
}

TEST(Bpe, ZeroMergesIsCharacterLevel) {
  const std::vector<std::string> corpus{"hello world"};
  auto m = train_bpe(corpus, 0);
  EXPECT_EQ(m.size(), 0u);
  auto v = build_vocabulary(corpus, m);
  for (int id : encode("hello", m, v)) EXPECT_LE(v.token(id).size(), 3u);  // one char plus "@@"
  EXPECT_EQ(encode("hello", m, v).size(), 5u);
}

TEST(Bpe, EmptyCorpusIsAnError) {
  const std::vector<std::string> corpus{"", "   "};
  EXPECT_THROW(train_bpe(corpus, 3), Error);
}

TEST(Bpe, MergeFileRoundTrip) {
  const auto dir = testing::scratch_dir("merges");
  const std::vector<std::string> corpus{"the cat sat on the mat", "the hat"};
  auto m = train_bpe(corpus, 6);
  m.save((dir / "m.txt").string());
  auto back = MergeTable::load((dir / "m.txt").string());
  EXPECT_EQ(back.rules(), m.rules());
}

TEST(Vocab, SpecialsComeFirstAndMapsAreInverse) {
  const std::vector<std::string> corpus{"a b c a"};
  auto v = build_vocabulary(corpus, MergeTable{});
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocabulary::kBos), "<bos>");
  EXPECT_EQ(v.token(Vocabulary::kEos), "<eos>");
  EXPECT_EQ(v.token(Vocabulary::kUnk), "<unk>");
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<int>(i))), static_cast<int>(i));
  EXPECT_EQ(v.token(4), "a");  // most frequent first
}

TEST(Vocab, FileRoundTripAndHeaderCheck) {
  const auto dir = testing::scratch_dir("vocab");
  auto v = testing::plain_vocab(5);
  v.save((dir / "v.txt").string());
  auto back = Vocabulary::load((dir / "v.txt").string());
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
  std::ofstream((dir / "bad.txt").string()) << "x\ny\n";
  EXPECT_THROW(Vocabulary::load((dir / "bad.txt").string()), Error);
}

TEST(Encode, EmptyStringAndUnknownCharacter) {
  const std::vector<std::string> corpus{"abc abd"};
  auto m = train_bpe(corpus, 10);
  auto v = build_vocabulary(corpus, m);
  EXPECT_TRUE(encode("", m, v).empty());
  auto ids = encode("abz", m, v);
  EXPECT_NE(std::find(ids.begin(), ids.end(), Vocabulary::kUnk), ids.end());
}

TEST(Encode, RoundTripOverToyCorpus) {
  const auto corpus = toy::bpe_corpus(toy::make_toy_corpus({200, 10, 10}).train);
  for (std::size_t merges : {0u, 10u, 40u, 200u}) {
    auto m = train_bpe(corpus, merges);
    auto v = build_vocabulary(corpus, m);
    for (const auto& s : corpus) EXPECT_EQ(decode(encode(s, m, v), v), s) << "merges=" << merges;
  }
}

TEST(Encode, RoundTripPropertyOnRandomSentences) {
  Rng rng(21);
  const std::string alphabet = "abcdefg";
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> corpus;
    for (int l = 0; l < 8; ++l) {
      std::string line;
      const auto words = 1 + rng.uniform_int(6);
      for (std::size_t w = 0; w < words; ++w) {
        if (!line.empty()) line += ' ';
        const auto len = 1 + rng.uniform_int(5);
        for (std::size_t c = 0; c < len; ++c) line += alphabet[rng.uniform_int(alphabet.size())];
      }
      corpus.push_back(line);
    }
    auto m = train_bpe(corpus, rng.uniform_int(20));
    auto v = build_vocabulary(corpus, m);
    for (const auto& s : corpus) EXPECT_EQ(decode(encode(s, m, v), v), s);
  }
}

TEST(Normalize, LowercasesAndCollapsesWhitespace) {
  EXPECT_EQ(normalize_line("  Hello   WORLD\t x "), "hello world x");
  EXPECT_EQ(normalize_line(""), "");
}

TEST(Corpus, ParallelFilesAndTsv) {
  const auto dir = testing::scratch_dir("corpus");
  std::ofstream(dir / "a.src") << "Hello world\n\nthird line\n";
  std::ofstream(dir / "a.tgt") << "hallo welt\nskipped\ndritte zeile\n";
  auto pairs = read_parallel((dir / "a.src").string(), (dir / "a.tgt").string());
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].src, "hello world");
  EXPECT_EQ(pairs[1].tgt, "dritte zeile");
  std::ofstream(dir / "b.tsv") << "a b\tc d\n\nE\tF\n";
  auto tsv = read_tsv((dir / "b.tsv").string());
  ASSERT_EQ(tsv.size(), 2u);
  EXPECT_EQ(tsv[1].src, "e");
  std::ofstream(dir / "short.tgt") << "x\n";
  EXPECT_THROW(read_parallel((dir / "a.src").string(), (dir / "short.tgt").string()), Error);
  EXPECT_THROW(read_lines((dir / "missing").string()), Error);
}

// ---------------------------------------------------------------------------
// bidirectional data

TEST(Bidirectional, DoublesAndSwaps) {
  Rng rng(22);
  auto pairs = random_pairs(rng, 7, 12, 1, 5);
  auto bi = make_bidirectional(pairs);
  ASSERT_EQ(bi.size(), 14u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(bi[i].src, pairs[i].src);
    EXPECT_EQ(bi[i].tgt, pairs[i].tgt);
    EXPECT_EQ(bi[i].direction, Direction::kForward);
    EXPECT_EQ(bi[7 + i].src, pairs[i].tgt);
    EXPECT_EQ(bi[7 + i].tgt, pairs[i].src);
    EXPECT_EQ(bi[7 + i].direction, Direction::kReversed);
    EXPECT_EQ(bi[7 + i].tgt.back(), Vocabulary::kEos);
  }
  EXPECT_TRUE(make_bidirectional(std::vector<SentencePair>{}).empty());
}

TEST(Bidirectional, AppendsEosWhenSourceLacksIt) {
  SentencePair p{{5, 6}, {7, Vocabulary::kEos}, Direction::kForward};
  auto bi = make_bidirectional(std::vector<SentencePair>{p});
  EXPECT_EQ(bi[1].tgt, (std::vector<int>{5, 6, Vocabulary::kEos}));
}

TEST(Bidirectional, OptionalDirectionTags) {
  SentencePair p{{5, Vocabulary::kEos}, {7, Vocabulary::kEos}, Direction::kForward};
  auto bi = make_bidirectional(std::vector<SentencePair>{p}, DirectionTags{8, 9});
  EXPECT_EQ(bi[0].src.front(), 8);
  EXPECT_EQ(bi[1].src.front(), 9);
}

// ---------------------------------------------------------------------------
// batches

TEST(Batch, DecoderInputIsShiftedTarget) {
  SentencePair a{{5, 6, 2}, {7, 8, 9, 2}, Direction::kForward};
  SentencePair b{{5, 2}, {7, 2}, Direction::kForward};
  auto batch = make_batch(std::vector<SentencePair>{a, b});
  EXPECT_EQ(batch.rows, 2u);
  EXPECT_EQ(batch.src_width, 3u);
  EXPECT_EQ(batch.tgt_width, 4u);
  EXPECT_EQ(batch.dec_in, (std::vector<int>{1, 7, 8, 9, 1, 7, 0, 0}));
  EXPECT_EQ(batch.target, (std::vector<int>{7, 8, 9, 2, 7, 2, 0, 0}));
  EXPECT_EQ(batch.src, (std::vector<int>{5, 6, 2, 5, 2, 0}));
  EXPECT_EQ(batch.token_count, 6u);
}

TEST(Batch, OnePairOneBatch) {
  Rng rng(23);
  auto pairs = random_pairs(rng, 1, 10, 2, 4);
  Rng order(1);
  auto batches = batch_by_tokens(pairs, 100, order);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0].rows, 1u);
}

TEST(Batch, PartitionAndBudgetProperty) {
  Rng rng(24);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(80);
    auto pairs = random_pairs(rng, n, 20, 0, 1 + rng.uniform_int(15));
    std::size_t longest = 0;
    for (const auto& p : pairs) longest = std::max(longest, p.src.size() + p.tgt.size());
    const std::size_t budget = longest + rng.uniform_int(200);
    Rng order(trial);
    auto chunks = batch_indices_by_tokens(pairs, budget, order);
    std::vector<std::size_t> seen;
    for (const auto& c : chunks) {
      std::size_t ms = 0, mt = 0;
      for (auto i : c) {
        ms = std::max(ms, pairs[i].src.size());
        mt = std::max(mt, pairs[i].tgt.size());
        seen.push_back(i);
      }
      EXPECT_LE(c.size() * (ms + mt), budget);
    }
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    EXPECT_EQ(seen, all);
  }
}

TEST(Batch, LengthHundredPairsFortyPerBatch) {
  std::vector<SentencePair> pairs;
  for (int i = 0; i < 200; ++i) {
    SentencePair p;
    p.src.assign(49, 5);
    p.src.push_back(2);
    p.tgt.assign(49, 6);
    p.tgt.push_back(2);
    pairs.push_back(p);
  }
  Rng order(3);
  for (const auto& c : batch_indices_by_tokens(pairs, 4096, order)) EXPECT_LE(c.size(), 40u);
}

TEST(Batch, OversizedPairIsNamed) {
  Rng rng(25);
  auto pairs = random_pairs(rng, 3, 10, 2, 3);
  pairs[2].src.assign(50, 5);
  Rng order(1);
  try {
    batch_by_tokens(pairs, 20, order);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("pair 2"), std::string::npos);
  }
}

TEST(Batch, OrderDependsOnlyOnSeed) {
  Rng rng(26);
  auto pairs = random_pairs(rng, 50, 20, 1, 8);
  Rng a(5), b(5), c(6);
  EXPECT_EQ(batch_indices_by_tokens(pairs, 64, a), batch_indices_by_tokens(pairs, 64, b));
  EXPECT_NE(batch_indices_by_tokens(pairs, 64, a), batch_indices_by_tokens(pairs, 64, c));
}

// ---------------------------------------------------------------------------
// perturbation samplers

std::vector<int> mixed_tokens(Rng& rng, std::size_t n) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_int(12));  // includes pad and specials
  return t;
}

TEST(ZeroMask, ProbabilityZeroKeepsEverything) {
  Rng rng(27);
  auto t = mixed_tokens(rng, 1000);
  auto m = sample_zero_mask(t, ZeroMaskSpec::cutoff(0.0), rng);
  EXPECT_EQ(std::count(m.begin(), m.end(), 1), 0);
}

TEST(ZeroMask, ProbabilityOneZeroesEveryRealPosition) {
  Rng rng(28);
  auto t = mixed_tokens(rng, 1000);
  ZeroMaskSpec spec{ZeroMaskKind::kCutoff, 1.0, false};
  auto m = sample_zero_mask(t, spec, rng);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(m[i], t[i] == Vocabulary::kPad ? 0 : 1);
}

TEST(ZeroMask, CutoffRateWithinBinomialBoundAndSpecialsUntouched) {
  Rng rng(29);
  std::vector<int> t;
  while (t.size() < 100000) {
    const int x = static_cast<int>(rng.uniform_int(12));
    t.push_back(x);
  }
  auto m = sample_zero_mask(t, ZeroMaskSpec::cutoff(0.05), rng);
  std::size_t eligible = 0, zeroed = 0, violations = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (Vocabulary::is_special(t[i])) {
      violations += m[i];
    } else {
      ++eligible;
      zeroed += m[i];
    }
  }
  const double frac = static_cast<double>(zeroed) / static_cast<double>(eligible);
  EXPECT_GE(frac, 0.045);
  EXPECT_LE(frac, 0.055);
  EXPECT_EQ(violations, 0u);
}

TEST(ZeroMask, WordDropUsesOneMinusKeep) {
  EXPECT_DOUBLE_EQ(ZeroMaskSpec::word_drop(0.9).zero_probability, 1.0 - 0.9);
  Rng rng(30);
  std::vector<int> t(50000, 7);
  auto m = sample_zero_mask(t, ZeroMaskSpec::word_drop(0.9), rng);
  const double frac = static_cast<double>(std::count(m.begin(), m.end(), 1)) / 50000.0;
  EXPECT_NEAR(frac, 0.1, 5 * std::sqrt(0.1 * 0.9 / 50000.0));
}

TEST(UniRep, ScheduleValues) {
  const UniRepSchedule s{0.9, 25};
  EXPECT_NEAR(unirep_probability(0, s), 25.0 / 26.0, 1e-12);
  EXPECT_EQ(unirep_probability(100, s), 0.9);
  EXPECT_EQ(unirep_probability(1000, s), 0.9);
  EXPECT_THROW(unirep_probability(-1, s), Error);
}

TEST(UniRep, ScheduleIsNonIncreasingAndFloored) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const UniRepSchedule s{rng.uniform(0.05, 1.0), rng.uniform(0.5, 60)};
    double prev = 2.0;
    for (int t = 0; t < 300; ++t) {
      const double p = unirep_probability(t, s);
      EXPECT_LE(p, prev);
      EXPECT_GE(p, s.q);
      EXPECT_LE(p, 1.0);
      prev = p;
    }
  }
}

TEST(UniRep, KeepOneIsIdentityKeepZeroResamplesAll) {
  Rng rng(32);
  SentencePair p{{5, 6, 7, 2}, {8, 9, 2}, Direction::kForward};
  EXPECT_EQ(apply_unirep(p, 1.0, rng, 20), p);
  std::size_t replaced = 0;
  auto q = apply_unirep(p, 0.0, rng, 20, &replaced);
  EXPECT_EQ(replaced, 5u);
  EXPECT_EQ(q.src.back(), Vocabulary::kEos);
  EXPECT_EQ(q.tgt.back(), Vocabulary::kEos);
  for (int id : q.src) EXPECT_TRUE(id == Vocabulary::kEos || (id >= 4 && id < 20));
}

TEST(UniRep, ReplacementRateWithinBinomialBound) {
  Rng rng(33);
  SentencePair p;
  p.src.assign(50000, 5);
  p.tgt.assign(50000, 6);
  std::size_t replaced = 0;
  apply_unirep(p, 0.9, rng, 30, &replaced);
  const double frac = static_cast<double>(replaced) / 1e5;
  EXPECT_GE(frac, 0.09);
  EXPECT_LE(frac, 0.11);
}

}  // namespace
}  // namespace simcut
