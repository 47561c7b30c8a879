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

// Pre-layer-norm encoder-decoder transformer over the autograd tensors.
//
// Token embeddings are scaled by sqrt(d_model); a zero mask (cutoff or word
// drop) removes the token part of masked positions before sinusoidal position
// encodings are added, so masked slots keep their position signal.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"
#include "simcut/text.hpp"

namespace simcut {

struct TransformerConfig {
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ffn = 128;
  double dropout = 0.3;
  std::size_t vocab_size = 0;
  bool share_embeddings = true;
  std::size_t max_len = 256;

  void validate() const {
    if (d_model == 0 || heads == 0 || d_ffn == 0) throw Error("TransformerConfig: dimensions must be positive");
    if (d_model % heads != 0)
      throw Error("TransformerConfig: d_model=" + std::to_string(d_model) + " not divisible by heads=" +
                  std::to_string(heads));
    if (vocab_size < 2) throw Error("TransformerConfig: vocab_size must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("TransformerConfig: dropout must lie in [0,1)");
    if (max_len == 0) throw Error("TransformerConfig: max_len must be positive");
  }

  bool operator==(const TransformerConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
                     {"heads", c.heads},                   {"d_model", c.d_model},
                     {"d_ffn", c.d_ffn},                   {"dropout", c.dropout},
                     {"vocab_size", c.vocab_size},         {"share_embeddings", c.share_embeddings},
                     {"max_len", c.max_len}};
}

inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("heads").get_to(c.heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("dropout").get_to(c.dropout);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("share_embeddings").get_to(c.share_embeddings);
  j.at("max_len").get_to(c.max_len);
}

/// Name -> shape of every trainable tensor. Shared embeddings appear once.
inline std::map<std::string, Shape> parameter_layout(const TransformerConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  std::map<std::string, Shape> layout;
  if (c.share_embeddings) {
    layout["embed.shared"] = {v, d};
  } else {
    layout["embed.src"] = {v, d};
    layout["embed.tgt"] = {v, d};
    layout["embed.out"] = {v, d};
  }
  auto attention = [&](const std::string& p) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) layout[p + "." + w] = {d, d};
    for (const char* b : {"bq", "bk", "bv", "bo"}) layout[p + "." + b] = {d};
  };
  auto norm = [&](const std::string& p) {
    layout[p + ".g"] = {d};
    layout[p + ".b"] = {d};
  };
  auto ffn = [&](const std::string& p) {
    layout[p + ".w1"] = {d, f};
    layout[p + ".b1"] = {f};
    layout[p + ".w2"] = {f, d};
    layout[p + ".b2"] = {d};
  };
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attention(p + ".self");
    norm(p + ".ln1");
    ffn(p + ".ffn");
    norm(p + ".ln2");
  }
  norm("enc.ln");
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    attention(p + ".self");
    norm(p + ".ln1");
    attention(p + ".cross");
    norm(p + ".ln2");
    ffn(p + ".ffn");
    norm(p + ".ln3");
  }
  norm("dec.ln");
  return layout;
}

/// Closed-form scalar count of the layout above.
inline std::size_t expected_param_count(const TransformerConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ffn = 2 * d * f + f + d;
  const std::size_t ln = 2 * d;
  const std::size_t emb = (c.share_embeddings ? 1 : 3) * v * d;
  return emb + c.encoder_layers * (attn + ffn + 2 * ln) + c.decoder_layers * (2 * attn + ffn + 3 * ln) + 2 * ln;
}

class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(TransformerConfig config, std::map<std::string, Tensor> tensors)
      : config_(std::move(config)), tensors_(std::move(tensors)) {
    const auto layout = parameter_layout(config_);
    if (layout.size() != tensors_.size())
      throw Error("ModelParams: expected " + std::to_string(layout.size()) + " tensors, got " +
                  std::to_string(tensors_.size()));
    for (const auto& [name, shape] : layout) {
      auto it = tensors_.find(name);
      if (it == tensors_.end()) throw Error("ModelParams: missing tensor " + name);
      if (it->second.shape() != shape)
        throw Error("ModelParams: tensor " + name + " has shape " + shape_str(it->second.shape()) +
                    ", expected " + shape_str(shape));
    }
  }

  const TransformerConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::map<std::string, Tensor>& tensors() { return tensors_; }

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("ModelParams: no tensor named " + name);
    return it->second;
  }

  const Tensor& src_embedding() const { return at(config_.share_embeddings ? "embed.shared" : "embed.src"); }
  const Tensor& tgt_embedding() const { return at(config_.share_embeddings ? "embed.shared" : "embed.tgt"); }
  const Tensor& output_projection() const {
    return at(config_.share_embeddings ? "embed.shared" : "embed.out");
  }

  void zero_grad() {
    for (auto& [n, t] : tensors_) t.zero_grad();
  }

  /// Deep copy with fresh leaves (same requires_grad flags).
  ModelParams clone() const {
    std::map<std::string, Tensor> copy;
    for (const auto& [n, t] : tensors_) copy.emplace(n, t.clone(t.requires_grad()));
    return ModelParams(config_, std::move(copy));
  }

  bool values_equal(const ModelParams& other) const {
    if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [n, t] : tensors_) {
      auto it = other.tensors_.find(n);
      if (it == other.tensors_.end() || it->second.shape() != t.shape()) return false;
      if (std::memcmp(t.values().data(), it->second.values().data(), t.numel() * sizeof(double)) != 0)
        return false;
    }
    return true;
  }

 private:
  TransformerConfig config_;
  std::map<std::string, Tensor> tensors_;
};

/// Embeddings and output projection ~ N(0, d^-1/2); other matrices uniform
/// Xavier; biases and layer-norm offsets 0; layer-norm gains 1. Tensors are
/// drawn in layout (name) order from one stream.
inline ModelParams init_params(const TransformerConfig& config, Rng& rng) {
  const auto layout = parameter_layout(config);
  std::map<std::string, Tensor> tensors;
  const double embed_std = std::pow(static_cast<double>(config.d_model), -0.5);
  for (const auto& [name, shape] : layout) {
    std::vector<double> values(numel_of(shape), 0.0);
    const bool is_embed = name.starts_with("embed.");
    const bool is_gain = name.ends_with(".g");
    if (is_embed) {
      for (double& v : values) v = rng.normal(0.0, embed_std);
    } else if (shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (double& v : values) v = rng.uniform(-limit, limit);
    } else if (is_gain) {
      std::fill(values.begin(), values.end(), 1.0);
    }
    tensors.emplace(name, Tensor::from(shape, std::move(values), true));
  }
  return ModelParams(config, std::move(tensors));
}

/// Number of distinct trainable scalars; a shared embedding counts once.
inline std::size_t count_params(const ModelParams& params) {
  std::set<const TensorImpl*> seen;
  std::size_t total = 0;
  for (const auto& [n, t] : params.tensors())
    if (seen.insert(t.impl()).second) total += t.numel();
  return total;
}

inline std::size_t count_params(const std::map<std::string, Tensor>& tensors) {
  std::set<const TensorImpl*> seen;
  std::size_t total = 0;
  for (const auto& [n, t] : tensors)
    if (seen.insert(t.impl()).second) total += t.numel();
  return total;
}

// ---------------------------------------------------------------------------
// Output distributions

/// Per-target-position distributions over the vocabulary, [positions, V],
/// with probability and log-probability views of the same rows.
struct ProbSequence {
  Tensor probs;
  Tensor log_probs;
  ByteMask valid;  // 1 = real target position

  std::size_t positions() const { return probs.dim(0); }
  std::size_t vocab() const { return probs.dim(1); }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }

  static ProbSequence from_logits(const Tensor& logits, ByteMask valid) {
    return {softmax(logits), log_softmax(logits), std::move(valid)};
  }

  /// Log view is log(max(p, 1e-12)).
  static ProbSequence from_probabilities(const Tensor& probs, ByteMask valid) {
    return {probs, log_clamped(probs), std::move(valid)};
  }
};

// ---------------------------------------------------------------------------
// Forward pass

inline std::vector<double> sinusoidal_positions(std::size_t length, std::size_t d) {
  std::vector<double> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(angle);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(angle);
    }
  return pe;
}

/// Token embedding lookup for a [rows, width] id matrix: gather, scale by
/// sqrt(d), zero the rows flagged in `zero_mask`, add `offset`, then add
/// position encodings when `positions` is set. `token_part`, when given,
/// receives the tensor after masking and before the offset.
inline Tensor embed(const Tensor& table, std::span<const int> ids, std::size_t width,
                    const ByteMask* zero_mask = nullptr, bool positions = true,
                    const Tensor* offset = nullptr, Tensor* token_part = nullptr) {
  const std::size_t d = table.dim(1);
  if (width == 0 || ids.size() % width != 0) throw Error("embed: id count not a multiple of width");
  Tensor x = scale(embedding(table, ids), std::sqrt(static_cast<double>(d)));
  if (zero_mask) {
    if (zero_mask->size() != ids.size()) throw Error("embed: zero mask length differs from id count");
    x = masked_fill(x, *zero_mask, 0.0);
  }
  if (token_part) *token_part = x;
  if (offset) x = add(x, *offset);
  if (positions) {
    x = reshape(x, {ids.size() / width, width, d});
    x = add(x, Tensor::from({width, d}, sinusoidal_positions(width, d)));
    x = reshape(x, {ids.size(), d});
  }
  return x;
}

struct ForwardOptions {
  Mode mode = Mode::kEval;
  Rng* dropout_rng = nullptr;
  const ByteMask* src_zero = nullptr;  // over batch.src positions
  const ByteMask* tgt_zero = nullptr;  // over batch.dec_in positions
  const Tensor* src_offset = nullptr;  // additive perturbation of source token embeddings
  const Tensor* tgt_offset = nullptr;
};

struct EncoderOutput {
  Tensor hidden;       // [rows*width, d]
  ByteMask src_pad;    // 1 = pad key
  std::size_t rows = 0;
  std::size_t width = 0;

  /// Copies the selected rows into a new (non-differentiable) output.
  EncoderOutput select_rows(std::span<const std::size_t> which) const {
    const std::size_t d = hidden.dim(1);
    EncoderOutput out;
    out.rows = which.size();
    out.width = width;
    std::vector<double> data;
    data.reserve(which.size() * width * d);
    for (std::size_t r : which) {
      auto begin = hidden.values().begin() + static_cast<std::ptrdiff_t>(r * width * d);
      data.insert(data.end(), begin, begin + static_cast<std::ptrdiff_t>(width * d));
      out.src_pad.insert(out.src_pad.end(), src_pad.begin() + static_cast<std::ptrdiff_t>(r * width),
                         src_pad.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
    }
    out.hidden = Tensor::from({which.size() * width, d}, std::move(data));
    return out;
  }
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

inline Tensor maybe_dropout(const Tensor& x, double rate, const ForwardOptions& opt) {
  if (opt.mode == Mode::kEval || rate == 0.0) return x;
  if (!opt.dropout_rng) throw Error("forward: training mode with dropout needs a dropout rng");
  return dropout(x, rate, *opt.dropout_rng, opt.mode);
}

/// Multi-head attention. `mask` has rows*heads*tq*tk entries, 1 = blocked.
inline Tensor attention(const ModelParams& p, const std::string& prefix, const Tensor& query_in,
                        const Tensor& kv_in, std::size_t rows, std::size_t tq, std::size_t tk,
                        const ByteMask& mask) {
  const auto& c = p.config();
  const std::size_t h = c.heads, dh = c.d_model / c.heads;
  auto split = [&](const Tensor& x, std::size_t t) {
    return reshape(swap_middle_axes(reshape(x, {rows, t, h, dh})), {rows * h, t, dh});
  };
  Tensor q = split(linear(query_in, p.at(prefix + ".wq"), p.at(prefix + ".bq")), tq);
  Tensor k = split(linear(kv_in, p.at(prefix + ".wk"), p.at(prefix + ".bk")), tk);
  Tensor v = split(linear(kv_in, p.at(prefix + ".wv"), p.at(prefix + ".bv")), tk);
  Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = masked_fill(scores, mask, -1e9);
  Tensor ctx = matmul(softmax(scores), v);
  ctx = reshape(swap_middle_axes(reshape(ctx, {rows, h, tq, dh})), {rows * tq, c.d_model});
  return linear(ctx, p.at(prefix + ".wo"), p.at(prefix + ".bo"));
}

inline Tensor feed_forward(const ModelParams& p, const std::string& prefix, const Tensor& x) {
  Tensor hidden = relu(linear(x, p.at(prefix + ".w1"), p.at(prefix + ".b1")));
  return linear(hidden, p.at(prefix + ".w2"), p.at(prefix + ".b2"));
}

inline Tensor norm(const ModelParams& p, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

inline ByteMask key_pad_mask(const ByteMask& pad, std::size_t rows, std::size_t heads, std::size_t tq,
                             std::size_t tk) {
  ByteMask m(rows * heads * tq * tk);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < tq; ++i)
        std::copy(pad.begin() + static_cast<std::ptrdiff_t>(r * tk),
                  pad.begin() + static_cast<std::ptrdiff_t>((r + 1) * tk),
                  m.begin() + static_cast<std::ptrdiff_t>(((r * heads + hh) * tq + i) * tk));
  return m;
}

inline ByteMask causal_mask(std::size_t rows, std::size_t heads, std::size_t t) {
  ByteMask m(rows * heads * t * t);
  for (std::size_t g = 0; g < rows * heads; ++g)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) m[(g * t + i) * t + j] = 1;
  return m;
}

}  // namespace detail

inline EncoderOutput encode_source(const ModelParams& p, std::span<const int> src, std::size_t rows,
                                   std::size_t width, const ForwardOptions& opt = {},
                                   Tensor* token_part = nullptr) {
  const auto& c = p.config();
  if (width > c.max_len) throw Error("forward: source width exceeds max_len");
  EncoderOutput out;
  out.rows = rows;
  out.width = width;
  out.src_pad.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out.src_pad[i] = src[i] == Vocabulary::kPad ? 1 : 0;
  Tensor x = embed(p.src_embedding(), src, width, opt.src_zero, true, opt.src_offset, token_part);
  x = detail::maybe_dropout(x, c.dropout, opt);
  const ByteMask mask = detail::key_pad_mask(out.src_pad, rows, c.heads, width, width);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    Tensor h = detail::norm(p, pre + ".ln1", x);
    x = add(x, detail::maybe_dropout(detail::attention(p, pre + ".self", h, h, rows, width, width, mask),
                                     c.dropout, opt));
    h = detail::norm(p, pre + ".ln2", x);
    x = add(x, detail::maybe_dropout(detail::feed_forward(p, pre + ".ffn", h), c.dropout, opt));
  }
  out.hidden = detail::norm(p, "enc.ln", x);
  return out;
}

/// Decoder logits [rows*width, V] for decoder inputs `dec_in` ([rows, width]).
inline Tensor decode_logits(const ModelParams& p, const EncoderOutput& enc, std::span<const int> dec_in,
                            std::size_t width, const ForwardOptions& opt = {}, Tensor* token_part = nullptr) {
  const auto& c = p.config();
  const std::size_t rows = enc.rows;
  if (dec_in.size() != rows * width) throw Error("decode_logits: decoder input does not match encoder rows");
  if (width > c.max_len) throw Error("forward: target width exceeds max_len");
  Tensor x = embed(p.tgt_embedding(), dec_in, width, opt.tgt_zero, true, opt.tgt_offset, token_part);
  x = detail::maybe_dropout(x, c.dropout, opt);
  const ByteMask self_mask = detail::causal_mask(rows, c.heads, width);
  const ByteMask cross_mask = detail::key_pad_mask(enc.src_pad, rows, c.heads, width, enc.width);
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Tensor h = detail::norm(p, pre + ".ln1", x);
    x = add(x, detail::maybe_dropout(detail::attention(p, pre + ".self", h, h, rows, width, width, self_mask),
                                     c.dropout, opt));
    h = detail::norm(p, pre + ".ln2", x);
    x = add(x, detail::maybe_dropout(
                   detail::attention(p, pre + ".cross", h, enc.hidden, rows, width, enc.width, cross_mask),
                   c.dropout, opt));
    h = detail::norm(p, pre + ".ln3", x);
    x = add(x, detail::maybe_dropout(detail::feed_forward(p, pre + ".ffn", h), c.dropout, opt));
  }
  x = detail::norm(p, "dec.ln", x);
  return matmul(x, p.output_projection(), /*transpose_b=*/true);
}

struct ForwardResult {
  ProbSequence dist;
  Tensor logits;
  Tensor src_tokens;  // masked, scaled source token embeddings before offsets
  Tensor tgt_tokens;
};

/// Teacher-forced forward pass producing a distribution per target position.
inline ForwardResult forward(const ModelParams& p, const Batch& batch, const ForwardOptions& opt = {}) {
  ForwardResult r;
  const EncoderOutput enc = encode_source(p, batch.src, batch.rows, batch.src_width, opt, &r.src_tokens);
  r.logits = decode_logits(p, enc, batch.dec_in, batch.tgt_width, opt, &r.tgt_tokens);
  ByteMask valid(batch.target.size());
  for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = batch.target[i] != Vocabulary::kPad ? 1 : 0;
  r.dist = ProbSequence::from_logits(r.logits, std::move(valid));
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   "SIMCUT1" | u64 meta_len | meta (UTF-8 JSON) |
//   repeated until EOF: u64 name_len | name | u64 rank | u64 dims[rank] | f64 values[]
// All integers and reals little-endian.

inline constexpr char kCheckpointMagic[] = "SIMCUT1";

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u64(std::istream& in, std::uint64_t& v) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

inline void put_f64(std::ostream& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  put_u64(out, bits);
}

inline double get_f64(std::istream& in) {
  std::uint64_t bits = 0;
  if (!get_u64(in, bits)) throw Error("checkpoint: truncated tensor data");
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

}  // namespace detail

struct Checkpoint {
  ModelParams params;
  nlohmann::json meta;
};

/// Writes params plus metadata; the model config is stored under meta["model"].
inline void save_checkpoint(const std::string& path, const ModelParams& params, nlohmann::json meta) {
  meta["model"] = params.config();
  const std::string text = meta.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 7);
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params.tensors()) {
    detail::put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(out, t.rank());
    for (auto d : t.shape()) detail::put_u64(out, d);
    for (double v : t.values()) detail::put_f64(out, v);
  }
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path);
  char magic[7];
  if (!in.read(magic, 7) || std::memcmp(magic, kCheckpointMagic, 7) != 0)
    throw Error("checkpoint " + path + ": bad magic");
  std::uint64_t meta_len = 0;
  if (!detail::get_u64(in, meta_len)) throw Error("checkpoint " + path + ": truncated header");
  std::string text(meta_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(meta_len)))
    throw Error("checkpoint " + path + ": truncated metadata");
  Checkpoint ck;
  ck.meta = nlohmann::json::parse(text);
  const TransformerConfig config = ck.meta.at("model").get<TransformerConfig>();
  std::map<std::string, Tensor> tensors;
  std::uint64_t name_len = 0;
  while (detail::get_u64(in, name_len)) {
    std::string name(name_len, '\0');
    std::uint64_t rank = 0;
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)) || !detail::get_u64(in, rank))
      throw Error("checkpoint " + path + ": truncated tensor header");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!detail::get_u64(in, v)) throw Error("checkpoint " + path + ": truncated tensor header");
      d = v;
    }
    std::vector<double> values(numel_of(shape));
    for (double& v : values) v = detail::get_f64(in);
    tensors.emplace(name, Tensor::from(shape, std::move(values), true));
  }
  ck.params = ModelParams(config, std::move(tensors));
  return ck;
}

}  // namespace simcut
