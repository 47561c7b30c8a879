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
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "simcut/simcut.hpp"
#include "support/helpers.hpp"
#include "support/toy_task.hpp"

namespace simcut {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(SIMCUT_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_side(const fs::path& p, const std::vector<RawPair>& pairs, bool source) {
  std::ofstream out(p);
  for (const auto& x : pairs) out << (source ? x.src : x.tgt) << '\n';
}

/// Toy data, vocab and a two-epoch model shared by the tests below.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testing::scratch_dir("cli");
    toy::ToySpec spec;
    spec.train_pairs = 40;
    spec.valid_pairs = 8;
    spec.test_pairs = 6;
    spec.max_words = 5;
    const auto c = toy::make_toy_corpus(spec);
    write_side(dir_ / "train.src", c.train, true);
    write_side(dir_ / "train.tgt", c.train, false);
    write_side(dir_ / "valid.src", c.valid, true);
    write_side(dir_ / "valid.tgt", c.valid, false);
    write_side(dir_ / "test.src", c.test, true);
    write_side(dir_ / "test.tgt", c.test, false);
    build_ = run("build-vocab --src " + p("train.src") + " --tgt " + p("train.tgt") + " --num-merges 60 --vocab-out " +
                 p("vocab.txt") + " --merges-out " + p("merges.txt"));
    std::ofstream(dir_ / "run.cfg") << "train_src = " << p("train.src") << "\ntrain_tgt = " << p("train.tgt")
                                    << "\nvalid_src = " << p("valid.src") << "\nvalid_tgt = " << p("valid.tgt")
                                    << "\nvocab = " << p("vocab.txt") << "\nmerges = " << p("merges.txt")
                                    << "\nencoder_layers = 1\ndecoder_layers = 1\nd_model = 16\nd_ffn = 32\n"
                                    << "epochs = 2\nwarmup = 10\nbase_lr = 5e-3\nmax_tokens = 256\nbeam = 2\n";
    train_ = run("train --config " + p("run.cfg") + " --objective=simcut --p_cut=0.1 --output_dir=" + p("model"));
  }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }
  std::string model_args() const {
    return " --checkpoint " + p("model") + " --vocab " + p("vocab.txt") + " --merges " + p("merges.txt");
  }

  static inline fs::path dir_;
  static inline CliRun build_, train_;
};

TEST_F(CliTest, BuildVocabIsDeterministic) {
  ASSERT_EQ(build_.code, 0) << build_.out;
  EXPECT_NE(build_.out.find("vocab_size="), std::string::npos);
  const auto again = run("build-vocab --src " + p("train.src") + " --tgt " + p("train.tgt") +
                         " --num-merges 60 --vocab-out " + p("vocab2.txt") + " --merges-out " + p("merges2.txt"));
  ASSERT_EQ(again.code, 0) << again.out;
  EXPECT_EQ(slurp(dir_ / "vocab.txt"), slurp(dir_ / "vocab2.txt"));
  EXPECT_EQ(slurp(dir_ / "merges.txt"), slurp(dir_ / "merges2.txt"));
}

TEST_F(CliTest, TrainWritesMetricsWithConsistencyColumn) {
  ASSERT_EQ(train_.code, 0) << train_.out;
  EXPECT_NE(train_.out.find("best_epoch="), std::string::npos);
  const std::string metrics = slurp(dir_ / "model" / "metrics.tsv");
  const std::string header = metrics.substr(0, metrics.find('\n'));
  EXPECT_NE(header.find("simkl"), std::string::npos) << header;
  EXPECT_TRUE(fs::exists(dir_ / "model" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "model" / "best.txt"));
  EXPECT_NE(slurp(dir_ / "model" / "config.resolved").find("objective = simcut"), std::string::npos);
}

TEST_F(CliTest, MissingRequiredKeysWriteNothing) {
  const auto r = run("train --objective=ce --output_dir=" + p("never"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("simcut: error:"), std::string::npos);
  EXPECT_NE(r.out.find("vocab"), std::string::npos);
  EXPECT_NE(r.out.find("merges"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "never"));
}

TEST_F(CliTest, BadConfigValueIsReported) {
  const auto r = run("train --config " + p("run.cfg") + " --alpha=lots --output_dir=" + p("bad"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("alpha"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "bad"));
}

TEST_F(CliTest, EvaluateReferenceAgainstItselfIs100) {
  const auto r = run("evaluate --ref " + p("test.tgt") + " --hyp " + p("test.tgt"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.rfind("BLEU = 100.00,", 0), 0u) << r.out;
}

TEST_F(CliTest, BeamOneMatchesGreedy) {
  ASSERT_EQ(train_.code, 0);
  const auto beam = run("translate" + model_args() + " --input " + p("test.src") + " --beam 1");
  const auto greedy = run("translate" + model_args() + " --input " + p("test.src") + " --greedy");
  ASSERT_EQ(beam.code, 0) << beam.out;
  ASSERT_EQ(greedy.code, 0) << greedy.out;
  EXPECT_EQ(beam.out, greedy.out);
  EXPECT_EQ(std::count(beam.out.begin(), beam.out.end(), '\n'), 6);
}

TEST_F(CliTest, EvaluateCheckpointMatchesTranslateThenEvaluate) {
  ASSERT_EQ(train_.code, 0);
  ASSERT_EQ(run("translate" + model_args() + " --input " + p("test.src") + " --output " + p("hyp.txt")).code, 0);
  const auto from_file = run("evaluate --ref " + p("test.tgt") + " --hyp " + p("hyp.txt"));
  const auto direct = run("evaluate --ref " + p("test.tgt") + " --src " + p("test.src") + model_args());
  ASSERT_EQ(direct.code, 0) << direct.out;
  EXPECT_EQ(from_file.out, direct.out);
}

TEST_F(CliTest, PerturbEvalWritesOneRowPerProbability) {
  ASSERT_EQ(train_.code, 0);
  const auto r = run("perturb-eval" + model_args() + " --src " + p("test.src") + " --ref " + p("test.tgt") +
                     " --greedy --probs 0,0.01,0.05,0.1");
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream in(r.out);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#' && line.rfind("probability", 0) != 0) rows.push_back(line);
  ASSERT_EQ(rows.size(), 4u) << r.out;
  EXPECT_EQ(rows[0].substr(0, 2), "0\t");
  EXPECT_EQ(rows[3].substr(0, 4), "0.1\t");
}

TEST_F(CliTest, FinetuneRecordsPhase) {
  ASSERT_EQ(train_.code, 0);
  const auto r = run("finetune --config " + p("run.cfg") + " --epochs=1 --init=" + p("model") + " --output_dir=" +
                     p("ft"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto ck = load_checkpoint((dir_ / "ft" / "last.ckpt").string());
  EXPECT_EQ(ck.meta.at("phase"), "finetune");
  EXPECT_NE(slurp(dir_ / "ft" / "metrics.tsv").find("\tfinetune\t"), std::string::npos);
}

TEST_F(CliTest, FinetuneWithoutInitFails) {
  const auto r = run("finetune --config " + p("run.cfg") + " --output_dir=" + p("ft_none"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("init"), std::string::npos);
}

TEST_F(CliTest, PrepareBidiDoublesPairs) {
  const auto r = run("prepare-bidi --src " + p("valid.src") + " --tgt " + p("valid.tgt") + " --out-tsv " +
                     p("bidi.tsv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("pairs=16"), std::string::npos);
  const auto pairs = read_tsv((dir_ / "bidi.tsv").string());
  ASSERT_EQ(pairs.size(), 16u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(pairs[i + 8].src, pairs[i].tgt);
    EXPECT_EQ(pairs[i + 8].tgt, pairs[i].src);
  }
}

TEST_F(CliTest, BadArgumentsExitNonzero) {
  auto r = run("translate --checkpoint " + p("absent") + " --vocab x --merges y --input z");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("simcut: error:"), std::string::npos);
  r = run("translate --vocab x");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("simcut: error:"), std::string::npos);
  r = run("no-such-command");
  EXPECT_NE(r.code, 0);
  r = run("evaluate --ref " + p("test.tgt") + " --hyp " + p("valid.tgt"));
  EXPECT_EQ(r.code, 1);
}

}  // namespace
}  // namespace simcut
