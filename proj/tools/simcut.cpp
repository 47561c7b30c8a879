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

// simcut: vocabulary building, data preparation, training, finetuning,
// translation, BLEU evaluation and robustness tables.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "simcut/simcut.hpp"

namespace fs = std::filesystem;
using namespace simcut;

namespace {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* v = std::getenv("SIMCUT_LOG");
  if (!v) return LogLevel::kInfo;
  const std::string s(v);
  if (s == "quiet") return LogLevel::kQuiet;
  if (s == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << "[simcut] " << msg << '\n';
}

void require_file(const std::string& path) {
  if (path.empty()) return;
  if (!fs::is_regular_file(path)) throw Error("no such file: " + path);
}

std::vector<RawPair> read_pairs(const std::string& src, const std::string& tgt, const std::string& tsv,
                                const std::string& what) {
  if (!tsv.empty()) {
    if (!src.empty() || !tgt.empty()) throw Error(what + ": give either a TSV file or source/target files");
    require_file(tsv);
    return read_tsv(tsv);
  }
  if (src.empty() || tgt.empty()) throw Error(what + ": need both source and target files (or a TSV file)");
  require_file(src);
  require_file(tgt);
  return read_parallel(src, tgt);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

struct TextModel {
  Checkpoint ck;
  Vocabulary vocab;
  MergeTable merges;
};

/// Resolves a run directory to its best checkpoint.
std::string resolve_checkpoint(const std::string& path) {
  if (fs::is_directory(path)) {
    const fs::path ptr = fs::path(path) / "best.txt";
    if (!fs::exists(ptr)) throw Error("run directory " + path + " has no best.txt");
    std::ifstream in(ptr);
    std::string name;
    in >> name;
    return (fs::path(path) / name).string();
  }
  require_file(path);
  return path;
}

void check_vocab_matches(const nlohmann::json& meta, const Vocabulary& vocab, const std::string& ck_path) {
  if (meta.contains("vocab_fingerprint") && meta.at("vocab_fingerprint").get<std::uint64_t>() != vocab.fingerprint())
    throw Error("checkpoint " + ck_path + " was trained with a different vocabulary");
}

TextModel load_text_model(const std::string& ck_path, const std::string& vocab_path, const std::string& merges_path) {
  require_file(vocab_path);
  require_file(merges_path);
  TextModel m{load_checkpoint(resolve_checkpoint(ck_path)), Vocabulary::load(vocab_path), MergeTable::load(merges_path)};
  check_vocab_matches(m.ck.meta, m.vocab, ck_path);
  if (m.ck.params.config().vocab_size != m.vocab.size())
    throw Error("checkpoint " + ck_path + " vocabulary size differs from " + vocab_path);
  return m;
}

std::vector<std::vector<int>> encode_sources(const std::vector<std::string>& lines, const TextModel& m) {
  std::vector<std::vector<int>> out;
  for (const auto& l : lines) {
    auto ids = encode(normalize_line(l), m.merges, m.vocab);
    ids.push_back(Vocabulary::kEos);
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<std::string> normalized(const std::vector<std::string>& lines) {
  std::vector<std::string> out;
  for (const auto& l : lines) out.push_back(normalize_line(l));
  return out;
}

std::string format_report(const BleuReport& r) {
  char buf[256];
  const double ratio = r.ref_length ? static_cast<double>(r.hyp_length) / static_cast<double>(r.ref_length) : 0.0;
  std::snprintf(buf, sizeof buf, "BLEU = %.2f, %.1f/%.1f/%.1f/%.1f (BP=%.3f, ratio=%.3f, hyp_len=%zu, ref_len=%zu)",
                r.bleu, 100 * r.precisions[0], 100 * r.precisions[1], 100 * r.precisions[2], 100 * r.precisions[3],
                r.brevity_penalty, ratio, r.hyp_length, r.ref_length);
  return buf;
}

/// Collects "--key=value" / "--key value" overrides left over by the parser.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw Error("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      cfg.set(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      cfg.set(body, extras[++i]);
    } else {
      cfg.set(body, "true");
    }
  }
}

int run_training(const std::string& config_path, const std::vector<std::string>& extras, bool finetuning) {
  RunConfig cfg;
  if (!config_path.empty()) cfg.merge_file(config_path);
  apply_overrides(cfg, extras);
  if (finetuning) cfg.set("phase", "finetune", "finetune command");
  cfg.check();
  std::vector<std::string> missing = cfg.missing({"vocab", "merges", "output_dir"});
  if (finetuning && cfg.str("init").empty()) missing.push_back("init");
  if (cfg.str("train_tsv").empty() && (cfg.str("train_src").empty() || cfg.str("train_tgt").empty()))
    missing.push_back("train_src/train_tgt or train_tsv");
  if (cfg.str("valid_tsv").empty() && (cfg.str("valid_src").empty() || cfg.str("valid_tgt").empty()))
    missing.push_back("valid_src/valid_tgt or valid_tsv");
  if (!missing.empty()) {
    std::string msg = "missing required config keys:";
    for (const auto& k : missing) msg += " " + k;
    throw Error(msg);
  }

  require_file(cfg.str("vocab"));
  require_file(cfg.str("merges"));
  const Vocabulary vocab = Vocabulary::load(cfg.str("vocab"));
  const MergeTable merges = MergeTable::load(cfg.str("merges"));
  auto train_raw = read_pairs(cfg.str("train_src"), cfg.str("train_tgt"), cfg.str("train_tsv"), "training data");
  auto valid_raw = read_pairs(cfg.str("valid_src"), cfg.str("valid_tgt"), cfg.str("valid_tsv"), "validation data");
  if (train_raw.empty()) throw Error("training data is empty");
  if (valid_raw.empty()) throw Error("validation data is empty");
  auto train_pairs = encode_pairs(train_raw, merges, vocab);
  auto valid_pairs = encode_pairs(valid_raw, merges, vocab);
  if (cfg.flag("bidirectional")) {
    train_pairs = make_bidirectional(train_pairs);
    valid_pairs = make_bidirectional(valid_pairs);
  }

  TrainConfig tc = cfg.train_config();
  std::optional<Checkpoint> init;
  if (finetuning) {
    const std::string ck_path = resolve_checkpoint(cfg.str("init"));
    init = load_checkpoint(ck_path);
    check_vocab_matches(init->meta, vocab, ck_path);
  } else {
    tc.model.vocab_size = vocab.size();
    tc.model.validate();
  }
  tc.objective.validate();
  for (const auto& p : train_pairs)
    if (p.src.size() + p.tgt.size() > tc.max_tokens)
      throw Error("a training pair has more tokens than max_tokens=" + std::to_string(tc.max_tokens));

  fs::create_directories(tc.output_dir);
  {
    std::ofstream echo(fs::path(tc.output_dir) / "config.resolved", std::ios::trunc);
    echo << cfg.resolved_text();
  }
  log(LogLevel::kInfo, std::string(finetuning ? "finetuning" : "training") + " objective=" + cfg.str("objective") +
                           " pairs=" + std::to_string(train_pairs.size()) + " vocab=" + std::to_string(vocab.size()));
  auto report = [](const TrainState& st) {
    const auto& r = st.history.back();
    std::ostringstream os;
    os << "epoch " << r.epoch << " loss=" << r.train_loss << " lr=" << r.lr << " val=" << r.val_score;
    log(LogLevel::kInfo, os.str());
  };
  const TrainState st = finetuning ? finetune(*init, tc, train_pairs, valid_pairs, vocab, report)
                                   : train(tc, train_pairs, valid_pairs, vocab, nullptr, report);
  std::cout << "best_epoch=" << st.best_epoch << " best_val=" << st.best_score << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SimCut lab: NMT training with consistency regularization"};
  app.require_subcommand(1);

  // build-vocab
  std::string bv_src, bv_tgt, bv_tsv, bv_vocab, bv_merges;
  std::size_t bv_num_merges = 1000;
  auto* build = app.add_subcommand("build-vocab", "learn BPE merges and a joint vocabulary");
  build->add_option("--src", bv_src, "source-side corpus");
  build->add_option("--tgt", bv_tgt, "target-side corpus");
  build->add_option("--tsv", bv_tsv, "tab-separated corpus");
  build->add_option("--num-merges", bv_num_merges, "number of BPE merges")->capture_default_str();
  build->add_option("--vocab-out", bv_vocab, "vocabulary file to write")->required();
  build->add_option("--merges-out", bv_merges, "merge file to write")->required();

  // prepare-bidi
  std::string pb_src, pb_tgt, pb_tsv, pb_out_src, pb_out_tgt, pb_out_tsv;
  auto* bidi = app.add_subcommand("prepare-bidi", "write forward pairs followed by swapped pairs");
  bidi->add_option("--src", pb_src);
  bidi->add_option("--tgt", pb_tgt);
  bidi->add_option("--tsv", pb_tsv);
  bidi->add_option("--out-src", pb_out_src);
  bidi->add_option("--out-tgt", pb_out_tgt);
  bidi->add_option("--out-tsv", pb_out_tsv);

  // train / finetune
  std::string tr_config, ft_config;
  auto* trn = app.add_subcommand("train", "train a model; extra --key=value pairs override the config");
  trn->add_option("--config", tr_config, "config file");
  trn->allow_extras();
  auto* fin = app.add_subcommand("finetune", "finetune from --init; extra --key=value pairs override the config");
  fin->add_option("--config", ft_config, "config file");
  fin->allow_extras();

  // translate
  std::string tl_ck, tl_vocab, tl_merges, tl_input, tl_output;
  std::size_t tl_beam = 5, tl_max_len = 0;
  double tl_lp = 1.0;
  bool tl_greedy = false;
  auto* trl = app.add_subcommand("translate", "translate one sentence per line");
  trl->add_option("--checkpoint", tl_ck, "checkpoint file or run directory")->required();
  trl->add_option("--vocab", tl_vocab)->required();
  trl->add_option("--merges", tl_merges)->required();
  trl->add_option("--input", tl_input)->required();
  trl->add_option("--output", tl_output, "defaults to stdout");
  trl->add_option("--beam", tl_beam)->capture_default_str();
  trl->add_option("--length-penalty", tl_lp)->capture_default_str();
  trl->add_option("--max-len", tl_max_len, "0: twice the source length plus 10");
  trl->add_flag("--greedy", tl_greedy, "greedy decoding");

  // evaluate
  std::string ev_hyp, ev_ref, ev_ck, ev_vocab, ev_merges, ev_src;
  std::size_t ev_beam = 5;
  double ev_lp = 1.0;
  bool ev_greedy = false;
  auto* eva = app.add_subcommand("evaluate", "corpus BLEU of a hypothesis file, or of a checkpoint's translations");
  eva->add_option("--ref", ev_ref)->required();
  eva->add_option("--hyp", ev_hyp);
  eva->add_option("--checkpoint", ev_ck);
  eva->add_option("--vocab", ev_vocab);
  eva->add_option("--merges", ev_merges);
  eva->add_option("--src", ev_src);
  eva->add_option("--beam", ev_beam)->capture_default_str();
  eva->add_option("--length-penalty", ev_lp)->capture_default_str();
  eva->add_flag("--greedy", ev_greedy);

  // perturb-eval
  std::string pe_ck, pe_vocab, pe_merges, pe_src, pe_ref, pe_output;
  std::vector<double> pe_probs{0.0, 0.01, 0.05, 0.10};
  std::uint64_t pe_seed = 1;
  std::size_t pe_beam = 5;
  double pe_lp = 1.0;
  bool pe_greedy = false;
  auto* pev = app.add_subcommand("perturb-eval", "BLEU under random source token replacement");
  pev->add_option("--checkpoint", pe_ck)->required();
  pev->add_option("--vocab", pe_vocab)->required();
  pev->add_option("--merges", pe_merges)->required();
  pev->add_option("--src", pe_src)->required();
  pev->add_option("--ref", pe_ref)->required();
  pev->add_option("--probs", pe_probs, "replacement probabilities")->delimiter(',')->capture_default_str();
  pev->add_option("--seed", pe_seed)->capture_default_str();
  pev->add_option("--beam", pe_beam)->capture_default_str();
  pev->add_option("--length-penalty", pe_lp)->capture_default_str();
  pev->add_flag("--greedy", pe_greedy);
  pev->add_option("--output", pe_output, "table file; defaults to stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "simcut: error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*build) {
      std::vector<std::string> corpus;
      if (!bv_tsv.empty()) {
        require_file(bv_tsv);
        for (const auto& p : read_tsv(bv_tsv)) {
          corpus.push_back(p.src);
          corpus.push_back(p.tgt);
        }
      }
      for (const auto& path : {bv_src, bv_tgt}) {
        if (path.empty()) continue;
        require_file(path);
        for (const auto& l : read_lines(path)) {
          auto n = normalize_line(l);
          if (!n.empty()) corpus.push_back(std::move(n));
        }
      }
      if (corpus.empty()) throw Error("build-vocab: no corpus given (use --src/--tgt or --tsv)");
      const MergeTable merges = train_bpe(corpus, bv_num_merges);
      const Vocabulary vocab = build_vocabulary(corpus, merges);
      merges.save(bv_merges);
      vocab.save(bv_vocab);
      std::cout << "vocab_size=" << vocab.size() << " merges=" << merges.size() << '\n';
    } else if (*bidi) {
      const auto pairs = read_pairs(pb_src, pb_tgt, pb_tsv, "prepare-bidi");
      std::vector<RawPair> both(pairs);
      for (const auto& p : pairs) both.push_back({p.tgt, p.src});
      if (!pb_out_tsv.empty()) {
        std::vector<std::string> lines;
        for (const auto& p : both) lines.push_back(p.src + "\t" + p.tgt);
        write_lines(pb_out_tsv, lines);
      } else if (!pb_out_src.empty() && !pb_out_tgt.empty()) {
        std::vector<std::string> s, t;
        for (const auto& p : both) {
          s.push_back(p.src);
          t.push_back(p.tgt);
        }
        write_lines(pb_out_src, s);
        write_lines(pb_out_tgt, t);
      } else {
        throw Error("prepare-bidi: give --out-tsv or both --out-src and --out-tgt");
      }
      std::cout << "pairs=" << both.size() << '\n';
    } else if (*trn) {
      return run_training(tr_config, trn->remaining(), false);
    } else if (*fin) {
      return run_training(ft_config, fin->remaining(), true);
    } else if (*trl) {
      const TextModel m = load_text_model(tl_ck, tl_vocab, tl_merges);
      require_file(tl_input);
      DecodeConfig dc;
      dc.beam_size = tl_beam;
      dc.length_penalty = tl_lp;
      dc.max_len = tl_max_len;
      if (dc.beam_size == 0) throw Error("--beam must be at least 1");
      const auto hyps = translate(m.ck.params, encode_sources(read_lines(tl_input), m), m.vocab, dc, tl_greedy);
      if (tl_output.empty()) {
        for (const auto& h : hyps) std::cout << h << '\n';
      } else {
        write_lines(tl_output, hyps);
      }
    } else if (*eva) {
      require_file(ev_ref);
      const auto refs = normalized(read_lines(ev_ref));
      std::vector<std::string> hyps;
      if (!ev_hyp.empty()) {
        require_file(ev_hyp);
        hyps = normalized(read_lines(ev_hyp));
      } else if (!ev_ck.empty()) {
        if (ev_src.empty() || ev_vocab.empty() || ev_merges.empty())
          throw Error("evaluate: --checkpoint needs --src, --vocab and --merges");
        const TextModel m = load_text_model(ev_ck, ev_vocab, ev_merges);
        require_file(ev_src);
        DecodeConfig dc;
        dc.beam_size = ev_beam;
        dc.length_penalty = ev_lp;
        if (dc.beam_size == 0) throw Error("--beam must be at least 1");
        hyps = translate(m.ck.params, encode_sources(read_lines(ev_src), m), m.vocab, dc, ev_greedy);
      } else {
        throw Error("evaluate: give --hyp or --checkpoint");
      }
      const BleuReport r = corpus_bleu_text(hyps, refs);
      std::cout << format_report(r) << '\n';
    } else if (*pev) {
      const TextModel m = load_text_model(pe_ck, pe_vocab, pe_merges);
      require_file(pe_src);
      require_file(pe_ref);
      const auto src_lines = read_lines(pe_src);
      const auto ref_lines = read_lines(pe_ref);
      if (src_lines.size() != ref_lines.size()) throw Error("perturb-eval: --src and --ref differ in length");
      std::vector<SentencePair> test;
      const auto sources = encode_sources(src_lines, m);
      for (std::size_t i = 0; i < sources.size(); ++i) {
        auto tgt = encode(normalize_line(ref_lines[i]), m.merges, m.vocab);
        tgt.push_back(Vocabulary::kEos);
        test.push_back({sources[i], std::move(tgt), Direction::kForward});
      }
      DecodeConfig dc;
      dc.beam_size = pe_beam;
      dc.length_penalty = pe_lp;
      if (dc.beam_size == 0) throw Error("--beam must be at least 1");
      const auto rows = robustness_eval(m.ck.params, test, pe_probs, m.vocab, dc, pe_seed, pe_greedy);
      std::ostringstream header;
      header << "checkpoint=" << pe_ck << " seed=" << pe_seed << " beam=" << (pe_greedy ? 1 : pe_beam)
             << " sentences=" << test.size();
      if (pe_output.empty()) {
        std::cout << "# " << header.str() << "\nprobability\tbleu\n";
        for (const auto& r : rows) std::cout << r.probability << '\t' << r.bleu << '\n';
      } else {
        write_robustness_table(pe_output, rows, header.str());
      }
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n' || c == '\r') c = ' ';
    std::cerr << "simcut: error: " << msg << '\n';
    return 1;
  }
  return 0;
}
