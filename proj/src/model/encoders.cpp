// Copyright 2026 The CBCE Authors.
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

#include "cbce/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cbce/ops.hpp"

namespace cbce {

PhraseSet PhraseSet::from_tokens(const std::vector<std::vector<int>>& token_lists,
                                 std::size_t vocab_size) {
  if (token_lists.empty()) throw ValidationError("phrase set must contain at least one phrase");
  PhraseSet set;
  set.vocab_size = vocab_size;
  for (const auto& tokens : token_lists) {
    if (tokens.empty()) throw ValidationError("empty phrase (length 0)");
    for (int id : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size));
      }
    }
    set.max_len = std::max(set.max_len, tokens.size());
  }
  for (const auto& tokens : token_lists) {
    std::vector<int> padded = tokens;
    padded.resize(set.max_len, kPadId);
    set.phrases.push_back(std::move(padded));
    set.lengths.push_back(tokens.size());
  }
  return set;
}

VisualEncoder::VisualEncoder(ParamStore& store, const std::string& prefix,
                             const std::array<std::size_t, kStages>& stage_channels,
                             std::size_t c_i, Rng& rng, std::size_t depth) {
  if (depth == 0) throw ValidationError("visual_encode: stage depth must be at least 1");
  std::size_t cin = 3;
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t cout = stage_channels[s];
    const std::string name = prefix + ".stage" + std::to_string(s + 1);
    // He-uniform for ReLU stages.
    stage_w_[s] = store.add_uniform(name + ".w", {3, 3, cin, cout},
                                    std::sqrt(6.0 / static_cast<double>(9 * cin)), rng);
    stage_b_[s] = store.add_constant(name + ".b", {cout}, 0.0);
    for (std::size_t k = 1; k < depth; ++k) {
      const std::string conv = name + ".conv" + std::to_string(k + 1);
      extra_w_[s].push_back(store.add_uniform(conv + ".w", {3, 3, cout, cout},
                                              std::sqrt(6.0 / static_cast<double>(9 * cout)), rng));
      extra_b_[s].push_back(store.add_constant(conv + ".b", {cout}, 0.0));
    }
    cin = cout;
  }
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t c = stage_channels[l + 2];
    const std::string name = prefix + ".proj" + std::to_string(l + 3);
    proj_w_[l] = store.add_glorot(name + ".w", {c, c_i}, c, c_i, rng);
    proj_b_[l] = store.add_constant(name + ".b", {c_i}, 0.0);
  }
}

FeaturePyramid VisualEncoder::encode(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("visual_encode: expected an [H,W,3] image, got " + shape_string(image.shape()));
  }
  if (image.dim(0) < kTotalStride || image.dim(1) < kTotalStride) {
    throw ValidationError("visual_encode: image " + shape_string(image.shape()) +
                          " is smaller than the total backbone stride " +
                          std::to_string(kTotalStride));
  }
  for (double v : image.data()) {
    if (v < 0.0 || v > 1.0) throw ValidationError("visual_encode: image values must lie in [0,1]");
  }
  Tensor x = ops::add(image, Tensor::full(image.shape(), -0.5, image.dtype()));
  std::array<Tensor, 3> taps;
  for (std::size_t s = 0; s < kStages; ++s) {
    x = ops::relu(ops::conv2d(x, stage_w_[s], stage_b_[s], 1, 2));
    for (std::size_t k = 0; k < extra_w_[s].size(); ++k) x = ops::relu(ops::conv2d(x, extra_w_[s][k], extra_b_[s][k]));
    if (s >= 2) taps[s - 2] = x;
  }
  FeaturePyramid pyramid;
  pyramid.height = taps[0].dim(0);
  pyramid.width = taps[0].dim(1);
  pyramid.channels = proj_w_[0].dim(1);
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor projected = ops::linear(taps[l], proj_w_[l], proj_b_[l]);
    if (l > 0) projected = ops::bilinear_upsample(projected, pyramid.height, pyramid.width);
    pyramid.levels[l] = projected;
  }
  return pyramid;
}

PhraseEncoder::PhraseEncoder(ParamStore& store, const std::string& prefix, std::size_t vocab_size,
                             std::size_t embed_dim, std::size_t hidden, Rng& rng)
    : hidden_(hidden), vocab_size_(vocab_size) {
  embed_ = store.add_uniform(prefix + ".embed", {vocab_size, embed_dim}, 0.08, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  wx_ = store.add_uniform(prefix + ".lstm.wx", {embed_dim, 4 * hidden}, bound, rng);
  wh_ = store.add_uniform(prefix + ".lstm.wh", {hidden, 4 * hidden}, bound, rng);
  // Gate order i, f, g, o; forget bias starts at 1.
  b_ = store.add_constant(prefix + ".lstm.b", {4 * hidden}, 0.0);
  auto bias = b_.mutable_data();
  std::fill(bias.begin() + static_cast<long>(hidden), bias.begin() + 2 * static_cast<long>(hidden), 1.0);
}

Tensor PhraseEncoder::encode_phrase(const std::vector<int>& tokens, std::size_t length) const {
  if (length == 0) throw ValidationError("empty phrase (length 0)");
  if (length > tokens.size()) throw ValidationError("phrase length exceeds its token list");
  std::vector<int> ids(tokens.begin(), tokens.begin() + static_cast<long>(length));
  const std::size_t c = hidden_;
  // Input contributions for every step at once: [len, 4C].
  Tensor xs = ops::linear(ops::embedding(embed_, ids), wx_, b_);
  Tensor h = Tensor::zeros({c}, embed_.dtype());
  Tensor cell = Tensor::zeros({c}, embed_.dtype());
  for (std::size_t t = 0; t < length; ++t) {
    Tensor gates = ops::add(ops::reshape(ops::slice(xs, 0, t, t + 1), {4 * c}),
                            ops::linear(h, wh_, Tensor()));
    Tensor in_gate = ops::sigmoid(ops::slice(gates, 0, 0, c));
    Tensor forget = ops::sigmoid(ops::slice(gates, 0, c, 2 * c));
    Tensor candidate = ops::tanh(ops::slice(gates, 0, 2 * c, 3 * c));
    Tensor out_gate = ops::sigmoid(ops::slice(gates, 0, 3 * c, 4 * c));
    cell = ops::add(ops::mul(forget, cell), ops::mul(in_gate, candidate));
    h = ops::mul(out_gate, ops::tanh(cell));
  }
  return h;
}

Tensor PhraseEncoder::encode(const PhraseSet& phrases) const {
  if (phrases.size() == 0) throw ValidationError("phrase set must contain at least one phrase");
  if (phrases.vocab_size > vocab_size_) {
    throw ValidationError("phrase set vocabulary (" + std::to_string(phrases.vocab_size) +
                          ") exceeds the encoder's (" + std::to_string(vocab_size_) + ")");
  }
  std::vector<Tensor> features;
  for (std::size_t p = 0; p < phrases.size(); ++p)
    features.push_back(encode_phrase(phrases.phrases[p], phrases.lengths[p]));
  if (features.size() == 1) return features.front();
  return ops::elementwise_max(features);
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (std::ispunct(ch)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : tokens_(tokens) {
  if (tokens_.size() < 2) throw ValidationError("vocabulary needs the PAD and UNK entries");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& phrases) {
  std::set<std::string> unique;
  for (const auto& phrase : phrases)
    for (auto& token : tokenize(phrase)) unique.insert(token);
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  tokens.insert(tokens.end(), unique.begin(), unique.end());
  return Vocabulary(tokens);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(tokens);
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write vocabulary file " + path);
  for (const auto& token : tokens_) out << token << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& phrase, std::size_t* unknown) const {
  std::vector<int> ids;
  for (const auto& token : tokenize(phrase)) {
    const int i = id(token);
    if (i == kUnkId && unknown) ++*unknown;
    ids.push_back(i);
  }
  return ids;
}

}  // namespace cbce
