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

// Flat run configuration: "key = value" lines, '#' comments. Every key is
// checked against a fixed schema; resolution order is defaults, then file,
// then overrides.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "simcut/decode.hpp"
#include "simcut/losses.hpp"
#include "simcut/tensor.hpp"
#include "simcut/trainer.hpp"
#include "simcut/transformer.hpp"

namespace simcut {

enum class KeyType { kString, kInt, kReal, kBool, kChoice };

struct KeySpec {
  std::string name;
  KeyType type;
  std::string default_value;
  std::vector<std::string> choices;
  std::string help;
};

inline const std::vector<KeySpec>& config_schema() {
  using K = KeyType;
  static const std::vector<KeySpec> schema = {
      // data
      {"train_src", K::kString, "", {}, "training source file"},
      {"train_tgt", K::kString, "", {}, "training target file"},
      {"train_tsv", K::kString, "", {}, "training pairs, one source<TAB>target per line"},
      {"valid_src", K::kString, "", {}, "validation source file"},
      {"valid_tgt", K::kString, "", {}, "validation target file"},
      {"valid_tsv", K::kString, "", {}, "validation pairs as TSV"},
      {"vocab", K::kString, "", {}, "vocabulary file"},
      {"merges", K::kString, "", {}, "BPE merge file"},
      {"output_dir", K::kString, "", {}, "run directory"},
      {"init", K::kString, "", {}, "checkpoint (or run directory) to finetune from"},
      {"bidirectional", K::kBool, "false", {}, "train on forward plus swapped pairs"},
      // model
      {"encoder_layers", K::kInt, "2", {}, ""},
      {"decoder_layers", K::kInt, "2", {}, ""},
      {"heads", K::kInt, "2", {}, ""},
      {"d_model", K::kInt, "64", {}, ""},
      {"d_ffn", K::kInt, "128", {}, ""},
      {"dropout", K::kReal, "0.3", {}, ""},
      {"share_embeddings", K::kBool, "true", {}, ""},
      {"max_len", K::kInt, "256", {}, "longest sequence the model accepts"},
      // objective
      {"objective", K::kChoice, "simcut", {"ce", "simcut", "token_cutoff", "rdrop", "vat", "unirep", "worddrop"}, ""},
      {"alpha", K::kReal, "3", {}, ""},
      {"beta", K::kReal, "1", {}, ""},
      {"p_cut", K::kReal, "0.05", {}, ""},
      {"n_cutoff", K::kInt, "1", {}, ""},
      {"label_smoothing", K::kReal, "0.1", {}, ""},
      {"simcut_bidirectional", K::kBool, "true", {}, "gradients through both KL arguments"},
      {"vat_epsilon", K::kReal, "1", {}, ""},
      {"vat_bidirectional", K::kBool, "false", {}, ""},
      {"unirep_q", K::kReal, "0.9", {}, ""},
      {"unirep_k", K::kReal, "25", {}, ""},
      {"worddrop_keep", K::kReal, "0.9", {}, ""},
      // optimization
      {"base_lr", K::kReal, "0.0005", {}, ""},
      {"warmup", K::kInt, "4000", {}, ""},
      {"adam_beta1", K::kReal, "0.9", {}, ""},
      {"adam_beta2", K::kReal, "0.98", {}, ""},
      {"adam_eps", K::kReal, "1e-08", {}, ""},
      {"epochs", K::kInt, "10", {}, ""},
      {"max_tokens", K::kInt, "4096", {}, "padded tokens per batch"},
      {"seed", K::kInt, "1", {}, "master seed"},
      {"phase", K::kChoice, "pretrain", {"pretrain", "finetune"}, ""},
      {"val_metric", K::kChoice, "bleu", {"bleu", "loss"}, ""},
      {"log_wall_clock", K::kBool, "false", {}, "record epoch wall time in metrics.tsv"},
      {"save_every_epoch", K::kBool, "false", {}, ""},
      // decoding
      {"beam", K::kInt, "5", {}, ""},
      {"length_penalty", K::kReal, "1", {}, ""},
      {"decode_max_len", K::kInt, "0", {}, "0: twice the source length plus 10"},
  };
  return schema;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : config_schema())
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return out = true, true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return out = false, true;
  return false;
}

inline bool parse_int(const std::string& v, long long& out) {
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

inline bool parse_real(const std::string& v, double& out) {
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size() && std::isfinite(out);
}

inline std::string value_problem(const KeySpec& k, const std::string& v) {
  bool b;
  long long i;
  double r;
  switch (k.type) {
    case KeyType::kString: return {};
    case KeyType::kBool: return parse_bool(v, b) ? "" : "expected true/false";
    case KeyType::kInt:
      if (!parse_int(v, i)) return "expected an integer";
      return i < 0 ? "must be non-negative" : "";
    case KeyType::kReal: return parse_real(v, r) ? "" : "expected a real number";
    case KeyType::kChoice:
      if (std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end()) return {};
      {
        std::string all;
        for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
        return "expected one of " + all;
      }
  }
  return {};
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  /// Records a value; problems are collected and reported by check().
  void set(std::string key, std::string value, const std::string& origin = "override") {
    std::replace(key.begin(), key.end(), '-', '_');
    const KeySpec* spec = find_key(key);
    if (!spec) {
      problems_.push_back(key + ": unknown key (" + origin + ")");
      return;
    }
    const std::string why = detail::value_problem(*spec, value);
    if (!why.empty()) {
      problems_.push_back(key + ": " + why + ", got '" + value + "' (" + origin + ")");
      return;
    }
    values_[key] = std::move(value);
    explicit_.insert(key);
  }

  void merge_text(std::string_view text, const std::string& origin) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      if (eq == std::string::npos) {
        problems_.push_back(where + ": expected 'key = value'");
        continue;
      }
      set(detail::trim(std::string_view(t).substr(0, eq)), detail::trim(std::string_view(t).substr(eq + 1)),
          where);
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path);
  }

  /// Throws one error naming every offending key collected so far.
  void check() const {
    if (problems_.empty()) return;
    std::string msg = "invalid config:";
    for (std::size_t i = 0; i < problems_.size(); ++i) msg += (i ? "; " : " ") + problems_[i];
    throw Error(msg);
  }

  const std::vector<std::string>& problems() const { return problems_; }
  bool is_set(const std::string& key) const { return explicit_.contains(key); }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error("config: unknown key " + key);
    return it->second;
  }
  std::size_t integer(const std::string& key) const {
    long long v = 0;
    if (!detail::parse_int(str(key), v) || v < 0) throw Error("config: " + key + " is not a non-negative integer");
    return static_cast<std::size_t>(v);
  }
  double real(const std::string& key) const {
    double v = 0;
    if (!detail::parse_real(str(key), v)) throw Error("config: " + key + " is not a real number");
    return v;
  }
  bool flag(const std::string& key) const {
    bool v = false;
    if (!detail::parse_bool(str(key), v)) throw Error("config: " + key + " is not a boolean");
    return v;
  }

  /// Names of required keys that are empty.
  std::vector<std::string> missing(std::initializer_list<const char*> keys) const {
    std::vector<std::string> out;
    for (const char* k : keys)
      if (str(k).empty()) out.push_back(k);
    return out;
  }

  /// Fully resolved configuration, one "key = value" line per schema key.
  std::string resolved_text() const {
    std::string out;
    for (const auto& k : config_schema()) out += k.name + " = " + values_.at(k.name) + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : config_schema()) j[k.name] = values_.at(k.name);
    return j;
  }

  TransformerConfig model_config() const {
    TransformerConfig c;
    c.encoder_layers = integer("encoder_layers");
    c.decoder_layers = integer("decoder_layers");
    c.heads = integer("heads");
    c.d_model = integer("d_model");
    c.d_ffn = integer("d_ffn");
    c.dropout = real("dropout");
    c.share_embeddings = flag("share_embeddings");
    c.max_len = integer("max_len");
    return c;
  }

  ObjectiveSpec objective() const {
    ObjectiveSpec s;
    s.kind = parse_objective(str("objective"));
    s.weights.alpha = real("alpha");
    s.weights.beta = real("beta");
    s.weights.p_cut = real("p_cut");
    s.weights.n_cutoff = integer("n_cutoff");
    s.weights.label_smoothing = real("label_smoothing");
    s.simcut_bidirectional = flag("simcut_bidirectional");
    s.vat.epsilon = real("vat_epsilon");
    s.vat.bidirectional = flag("vat_bidirectional");
    s.unirep.q = real("unirep_q");
    s.unirep.k = real("unirep_k");
    s.worddrop_keep = real("worddrop_keep");
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.model = model_config();
    t.objective = objective();
    t.optimizer.base_lr = real("base_lr");
    t.optimizer.warmup = integer("warmup");
    t.optimizer.beta1 = real("adam_beta1");
    t.optimizer.beta2 = real("adam_beta2");
    t.optimizer.eps = real("adam_eps");
    t.epochs = integer("epochs");
    t.max_tokens = integer("max_tokens");
    t.seed = integer("seed");
    t.phase = str("phase") == "finetune" ? Phase::kFinetune : Phase::kPretrain;
    t.val_metric = str("val_metric") == "loss" ? ValidationMetric::kLoss : ValidationMetric::kBleu;
    t.output_dir = str("output_dir");
    t.log_wall_clock = flag("log_wall_clock");
    t.save_every_epoch = flag("save_every_epoch");
    t.run_config = to_json();
    return t;
  }

  DecodeConfig decode_config() const {
    DecodeConfig d;
    d.beam_size = integer("beam");
    if (d.beam_size == 0) throw Error("config: beam must be at least 1");
    d.length_penalty = real("length_penalty");
    d.max_len = integer("decode_max_len");
    return d;
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
  std::vector<std::string> problems_;
};

}  // namespace simcut
