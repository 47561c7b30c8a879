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

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "simcut/simcut.hpp"

namespace simcut::testing {

/// 2-layer, d=8, V=11 model used by the gradient checks.
inline TransformerConfig tiny_config(double dropout = 0.1) {
  TransformerConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.dropout = dropout;
  c.vocab_size = 11;
  c.share_embeddings = true;
  c.max_len = 32;
  return c;
}

inline ModelParams tiny_model(std::uint64_t seed = 7, double dropout = 0.1) {
  Rng rng(seed);
  return init_params(tiny_config(dropout), rng);
}

/// Random pair with non-special ids in [4, vocab) and eos on both sides.
inline SentencePair random_pair(Rng& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
  auto seq = [&] {
    const std::size_t n = min_len + rng.uniform_int(max_len - min_len + 1);
    std::vector<int> ids(n);
    for (auto& t : ids) t = Vocabulary::kNumSpecial + static_cast<int>(rng.uniform_int(vocab - Vocabulary::kNumSpecial));
    ids.push_back(Vocabulary::kEos);
    return ids;
  };
  SentencePair p;
  p.src = seq();
  p.tgt = seq();
  return p;
}

inline std::vector<SentencePair> random_pairs(Rng& rng, std::size_t n, std::size_t vocab, std::size_t min_len,
                                              std::size_t max_len) {
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_pair(rng, vocab, min_len, max_len));
  return out;
}

/// Vocabulary with `n` plain tokens w0..w{n-1} after the specials.
inline Vocabulary plain_vocab(std::size_t n) {
  std::vector<std::string> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back("w" + std::to_string(i));
  return Vocabulary(t);
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t candidates = 0;
};

/// Central-difference check of d loss / d params over `count` coordinates
/// drawn from all parameter tensors. Coordinates whose analytic gradient is
/// below `floor` in magnitude are not sampled: there both sides sit at the
/// rounding-noise level and a relative error carries no information.
inline FdResult param_fd_check(const std::function<Tensor()>& loss_fn, ModelParams& params, std::size_t count,
                               std::uint64_t seed, double step = 1e-5, double floor = 1e-6) {
  params.zero_grad();
  backward(loss_fn());
  struct Coord {
    std::string name;
    std::size_t index;
    double analytic;
  };
  std::vector<Coord> pool;
  for (const auto& [name, t] : params.tensors()) {
    const auto g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (std::abs(g[i]) > floor) pool.push_back({name, i, g[i]});
  }
  params.zero_grad();
  FdResult r;
  r.candidates = pool.size();
  Rng rng(seed);
  rng.shuffle(pool);
  if (pool.size() > count) pool.resize(count);
  NoGradGuard guard;
  for (const auto& c : pool) {
    auto values = params.tensors().at(c.name).mutable_values();
    const double saved = values[c.index];
    values[c.index] = saved + step;
    const double up = loss_fn().item();
    values[c.index] = saved - step;
    const double down = loss_fn().item();
    values[c.index] = saved;
    const double numeric = (up - down) / (2.0 * step);
    r.max_rel_error =
        std::max(r.max_rel_error, std::abs(c.analytic - numeric) / (std::abs(c.analytic) + std::abs(numeric) + 1e-12));
    ++r.checked;
  }
  return r;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("simcut_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace simcut::testing
