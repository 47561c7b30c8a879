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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "simcut/trainer.hpp"
#include "support/helpers.hpp"
#include "support/toy_task.hpp"

namespace simcut {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct SmallTask {
  Vocabulary vocab;
  std::vector<SentencePair> train, valid;
};

SmallTask small_task(std::size_t train_pairs, std::size_t valid_pairs) {
  toy::ToySpec spec;
  spec.train_pairs = train_pairs;
  spec.valid_pairs = valid_pairs;
  spec.test_pairs = 0;
  spec.max_words = 5;
  auto c = toy::make_toy_corpus(spec);
  auto text = toy::bpe_corpus(c.train);
  for (const auto& p : c.valid) {
    text.push_back(p.src);
    text.push_back(p.tgt);
  }
  auto merges = train_bpe(text, 200);
  SmallTask t;
  t.vocab = build_vocabulary(text, merges);
  t.train = encode_pairs(c.train, merges, t.vocab);
  t.valid = encode_pairs(c.valid, merges, t.vocab);
  return t;
}

TrainConfig small_config(ObjectiveKind kind = ObjectiveKind::kCe) {
  TrainConfig c;
  c.model.encoder_layers = 1;
  c.model.decoder_layers = 1;
  c.model.d_model = 16;
  c.model.d_ffn = 32;
  c.model.dropout = 0.1;
  c.objective.kind = kind;
  c.optimizer.base_lr = 5e-3;
  c.optimizer.warmup = 20;
  c.epochs = 3;
  c.max_tokens = 256;
  c.seed = 3;
  return c;
}

// ---------------------------------------------------------------------------
// schedule and optimizer

TEST(Schedule, ClosedFormPoints) {
  EXPECT_EQ(lr_inverse_sqrt(4000, 4000, 5e-4), 5e-4);
  EXPECT_EQ(lr_inverse_sqrt(16000, 4000, 5e-4), 2.5e-4);
  EXPECT_EQ(lr_inverse_sqrt(2000, 4000, 5e-4), 2.5e-4);
  EXPECT_THROW(lr_inverse_sqrt(0, 10, 1.0), Error);
  EXPECT_THROW(lr_inverse_sqrt(1, 0, 1.0), Error);
}

TEST(Schedule, RisesThenFallsAndIsContinuous) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t w = 2 + rng.uniform_int(300);
    for (std::size_t s = 1; s < w; ++s) EXPECT_LT(lr_inverse_sqrt(s, w, 1.0), lr_inverse_sqrt(s + 1, w, 1.0));
    for (std::size_t s = w; s < 3 * w; ++s) EXPECT_GT(lr_inverse_sqrt(s, w, 1.0), lr_inverse_sqrt(s + 1, w, 1.0));
    EXPECT_EQ(lr_inverse_sqrt(w, w, 1.0), 1.0);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = testing::tiny_model();
  auto& w = p.tensors().at("enc.ln.g");
  std::fill(w.mutable_values().begin(), w.mutable_values().end(), 1.0);
  backward(sum(w));  // gradient 1 everywhere
  OptimizerConfig cfg;
  cfg.warmup = 10;
  cfg.base_lr = 0.3;
  Adam opt(cfg);
  const auto before = p.clone();
  const double lr = opt.step(p);
  EXPECT_DOUBLE_EQ(lr, 0.03);
  // m-hat = v-hat = 1 after one step
  for (double x : w.values()) EXPECT_NEAR(x, 1.0 - lr / (1.0 + 1e-8), 1e-15);
  for (const auto& [name, t] : p.tensors())
    if (name != "enc.ln.g") EXPECT_TRUE(std::equal(t.values().begin(), t.values().end(), before.at(name).values().begin()));
  EXPECT_EQ(opt.steps(), 1u);
  EXPECT_EQ(opt.moments().at("enc.ln.g").m.size(), w.numel());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = testing::tiny_model();
  const auto before = p.clone();
  Adam opt{OptimizerConfig{}};
  for (int i = 0; i < 3; ++i) opt.step(p);
  EXPECT_TRUE(p.values_equal(before));
}

TEST(Adam, NonFiniteGradientAbortsBeforeAnyUpdate) {
  auto p = testing::tiny_model();
  backward(sum(p.tensors().at("dec.ln.b")));
  backward(scale(sum(p.tensors().at("embed.shared")), std::numeric_limits<double>::infinity()));
  const auto before = p.clone();
  Adam opt{OptimizerConfig{}};
  EXPECT_THROW(opt.step(p), Error);
  EXPECT_TRUE(p.values_equal(before));
  EXPECT_EQ(opt.steps(), 0u);
}

// ---------------------------------------------------------------------------
// training loop

double eval_ce(const ModelParams& p, const std::vector<SentencePair>& pairs) {
  NoGradGuard g;
  auto b = make_batch(pairs);
  return ce_label_smoothed(forward(p, b).dist, b.target, 0.0).item();
}

TEST(Train, MemorizesTenPairs) {
  auto t = small_task(10, 5);
  auto cfg = small_config();
  cfg.model.dropout = 0.0;
  cfg.objective.weights.label_smoothing = 0.0;
  cfg.optimizer.base_lr = 1e-2;
  cfg.optimizer.warmup = 10;
  cfg.epochs = 30;
  cfg.max_tokens = 24;
  cfg.model.vocab_size = t.vocab.size();
  Rng init_rng(derive_seed(cfg.seed, "init"));
  const double initial = eval_ce(init_params(cfg.model, init_rng), t.train);
  auto st = train(cfg, t.train, t.valid, t.vocab);
  EXPECT_LT(eval_ce(st.params, t.train), 0.1 * initial);
  EXPECT_LT(st.history.back().train_loss, 0.1 * st.history.front().train_loss);
}

TEST(Train, SameSeedGivesIdenticalRunsAndFiles) {
  auto t = small_task(40, 8);
  auto cfg = small_config(ObjectiveKind::kSimCut);
  cfg.objective.weights.p_cut = 0.2;
  const auto a_dir = testing::scratch_dir("train_a"), b_dir = testing::scratch_dir("train_b");
  cfg.output_dir = a_dir.string();
  auto a = train(cfg, t.train, t.valid, t.vocab);
  cfg.output_dir = b_dir.string();
  auto b = train(cfg, t.train, t.valid, t.vocab);
  EXPECT_TRUE(a.params.values_equal(b.params));
  for (const char* f : {"metrics.tsv", "last.ckpt", "best.ckpt", "best.txt"})
    EXPECT_EQ(slurp(a_dir / f), slurp(b_dir / f)) << f;
  cfg.seed = 4;
  cfg.output_dir.clear();
  EXPECT_FALSE(train(cfg, t.train, t.valid, t.vocab).params.values_equal(a.params));
}

TEST(Train, BestCheckpointIsMaxOverEpochs) {
  auto t = small_task(40, 8);
  auto cfg = small_config();
  cfg.epochs = 5;
  cfg.val_metric = ValidationMetric::kLoss;
  const auto dir = testing::scratch_dir("train_best");
  cfg.output_dir = dir.string();
  std::vector<ModelParams> snapshots;
  auto st = train(cfg, t.train, t.valid, t.vocab, nullptr,
                  [&](const TrainState& s) { snapshots.push_back(s.params.clone()); });
  double best = -1e300;
  std::size_t arg = 0;
  for (const auto& r : st.history)
    if (r.val_score > best) {
      best = r.val_score;
      arg = r.epoch;
    }
  EXPECT_EQ(st.best_score, best);
  EXPECT_EQ(st.best_epoch, arg);
  EXPECT_TRUE(st.best_params.values_equal(snapshots[arg - 1]));
  auto ck = load_checkpoint((dir / "best.ckpt").string());
  EXPECT_TRUE(ck.params.values_equal(st.best_params));
  EXPECT_EQ(ck.meta.at("epoch").get<std::size_t>(), arg);
  EXPECT_EQ(ck.meta.at("phase").get<std::string>(), "pretrain");
  std::ifstream ptr(dir / "best.txt");
  std::string line;
  std::getline(ptr, line);
  EXPECT_EQ(line.rfind("best.ckpt\tepoch=" + std::to_string(arg) + "\t", 0), 0u);
  EXPECT_TRUE(load_checkpoint((dir / "last.ckpt").string()).params.values_equal(st.params));
}

TEST(Train, MetricsLogColumns) {
  auto t = small_task(20, 5);
  for (auto kind : {ObjectiveKind::kCe, ObjectiveKind::kSimCut, ObjectiveKind::kTokenCutoff}) {
    auto cfg = small_config(kind);
    cfg.epochs = 2;
    const auto dir = testing::scratch_dir("metrics");
    cfg.output_dir = dir.string();
    train(cfg, t.train, t.valid, t.vocab);
    std::ifstream in(dir / "metrics.tsv");
    std::string header, row;
    std::getline(in, header);
    std::string want = "epoch\tphase\ttrain_loss";
    for (const auto& c : objective_components(kind)) want += "\t" + c;
    want += "\tlr\tval_score\twall_seconds";
    EXPECT_EQ(header, want);
    int rows = 0;
    while (std::getline(in, row)) {
      ++rows;
      EXPECT_EQ(row.substr(row.rfind('\t') + 1), "-");
      EXPECT_NE(row.find("\tpretrain\t"), std::string::npos);
    }
    EXPECT_EQ(rows, 2);
  }
}

TEST(Train, UniRepAtKeepOneFollowsCeTrajectory) {
  auto t = small_task(30, 5);
  auto ce = small_config(ObjectiveKind::kCe);
  auto ur = small_config(ObjectiveKind::kUniRep);
  ur.objective.unirep.q = 1.0;
  EXPECT_TRUE(train(ce, t.train, t.valid, t.vocab).params.values_equal(train(ur, t.train, t.valid, t.vocab).params));
  ur.objective.unirep = {0.5, 0.5};  // p' already at the floor after one epoch
  EXPECT_FALSE(train(ce, t.train, t.valid, t.vocab).params.values_equal(train(ur, t.train, t.valid, t.vocab).params));
}

TEST(Train, EmptyInputsRejected) {
  auto t = small_task(10, 5);
  auto cfg = small_config();
  EXPECT_THROW(train(cfg, std::vector<SentencePair>{}, t.valid, t.vocab), Error);
  EXPECT_THROW(train(cfg, t.train, std::vector<SentencePair>{}, t.vocab), Error);
}

TEST(Validate, ScoresAndDeterminism) {
  auto t = small_task(10, 30);
  auto cfg = small_config();
  cfg.model.vocab_size = t.vocab.size();
  Rng rng(5);
  auto p = init_params(cfg.model, rng);
  const double bleu = validate(p, t.valid, ValidationMetric::kBleu, t.vocab, 0.1, 256);
  EXPECT_LT(bleu, 5.0);
  EXPECT_EQ(bleu, validate(p, t.valid, ValidationMetric::kBleu, t.vocab, 0.1, 256));
  const double loss = validate(p, t.valid, ValidationMetric::kLoss, t.vocab, 0.1, 256);
  EXPECT_LT(loss, 0.0);
  auto b = make_batch(t.valid);
  EXPECT_NEAR(-loss, ce_label_smoothed(forward(p, b).dist, b.target, 0.1).item(), 1e-10);
  EXPECT_THROW(validate(p, std::vector<SentencePair>{}, ValidationMetric::kLoss, t.vocab, 0.1, 256), Error);
}

TEST(Validate, MemorizedModelScoresHundred) {
  auto t = small_task(6, 1);
  auto cfg = small_config();
  cfg.model.dropout = 0.0;
  cfg.objective.weights.label_smoothing = 0.0;
  cfg.optimizer.base_lr = 1e-2;
  cfg.optimizer.warmup = 10;
  cfg.epochs = 80;
  auto st = train(cfg, t.train, t.train, t.vocab);
  EXPECT_EQ(validate(st.params, t.train, ValidationMetric::kBleu, t.vocab, 0.0, 256), 100.0);
}

// ---------------------------------------------------------------------------
// pretrain / finetune

TEST(Finetune, ZeroEpochsKeepsCheckpointParams) {
  auto t = small_task(20, 5);
  auto cfg = small_config();
  const auto dir = testing::scratch_dir("ft0");
  cfg.output_dir = dir.string();
  train(cfg, make_bidirectional(t.train), t.valid, t.vocab);
  auto ck = load_checkpoint((dir / "best.ckpt").string());
  auto ft = small_config();
  ft.epochs = 0;
  ft.model.d_model = 999;  // ignored: the architecture comes from the checkpoint
  auto st = finetune(ck, ft, t.train, t.valid, t.vocab);
  EXPECT_TRUE(st.params.values_equal(ck.params));
  EXPECT_EQ(st.phase, Phase::kFinetune);
  EXPECT_EQ(st.optimizer.steps(), 0u);
  EXPECT_TRUE(st.optimizer.moments().empty());
}

TEST(Finetune, PhaseFlipsInMetadataAndLog) {
  auto t = small_task(20, 5);
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto pre = testing::scratch_dir("ft_pre"), fin = testing::scratch_dir("ft_fin");
  cfg.output_dir = pre.string();
  train(cfg, make_bidirectional(t.train), t.valid, t.vocab);
  auto ck = load_checkpoint((pre / "best.ckpt").string());
  EXPECT_EQ(ck.meta.at("phase").get<std::string>(), "pretrain");
  cfg.output_dir = fin.string();
  auto st = finetune(ck, cfg, t.train, t.valid, t.vocab);
  EXPECT_EQ(st.optimizer.steps() > 0, true);
  EXPECT_EQ(load_checkpoint((fin / "last.ckpt").string()).meta.at("phase").get<std::string>(), "finetune");
  EXPECT_NE(slurp(fin / "metrics.tsv").find("\tfinetune\t"), std::string::npos);
}

TEST(Finetune, VocabularyMismatchRejected) {
  auto t = small_task(20, 5);
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto dir = testing::scratch_dir("ft_vocab");
  cfg.output_dir = dir.string();
  train(cfg, t.train, t.valid, t.vocab);
  auto ck = load_checkpoint((dir / "best.ckpt").string());
  auto other = t.vocab.tokens();
  std::swap(other[5], other[6]);
  other.erase(other.begin(), other.begin() + Vocabulary::kNumSpecial);
  EXPECT_THROW(finetune(ck, cfg, t.train, t.valid, Vocabulary(other)), Error);
}

TEST(Bidirectional, DoubledBatchIsMeanOfBothDirections) {
  auto p = testing::tiny_model(31, 0.0);
  SentencePair fwd{{5, 6, 7, 2}, {8, 9, 10, 2}, Direction::kForward};
  auto both = make_bidirectional(std::vector<SentencePair>{fwd});
  auto loss_of = [&](const std::vector<SentencePair>& pairs) {
    auto b = make_batch(pairs);
    return ce_label_smoothed(forward(p, b).dist, b.target, 0.1).item();
  };
  const double joint = loss_of(both);
  const double separate = 0.5 * (loss_of({both[0]}) + loss_of({both[1]}));
  EXPECT_NEAR(joint, separate, 1e-10);
}

}  // namespace
}  // namespace simcut
