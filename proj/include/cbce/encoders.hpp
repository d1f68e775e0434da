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

#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbce/params.hpp"
#include "cbce/rng.hpp"
#include "cbce/tensor.hpp"

namespace cbce {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

/// Visual features from backbone stages 3, 4 and 5, projected to a common
/// width and resized to the stage-3 grid.
struct FeaturePyramid {
  std::array<Tensor, 3> levels;  // I3, I4, I5, each [H,W,C_I]
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
};

/// Token-id phrases, right-padded with kPadId to max_len.
struct PhraseSet {
  std::vector<std::vector<int>> phrases;
  std::vector<std::size_t> lengths;
  std::size_t vocab_size = 0;
  std::size_t max_len = 0;

  std::size_t size() const { return phrases.size(); }

  // Pads the lists and validates ids; an empty phrase is an error.
  static PhraseSet from_tokens(const std::vector<std::vector<int>>& token_lists,
                               std::size_t vocab_size);
};

/// Strided five-stage CNN (3x3 conv, stride 2, ReLU) tapping stages 3-5,
/// each followed by a plain 1x1 projection to C_I channels.
class VisualEncoder {
 public:
  static constexpr std::size_t kStages = 5;
  static constexpr std::size_t kTotalStride = 32;

  VisualEncoder() = default;
  // Each stage is one stride-2 conv followed by depth - 1 stride-1 convs.
  VisualEncoder(ParamStore& store, const std::string& prefix,
                const std::array<std::size_t, kStages>& stage_channels, std::size_t c_i, Rng& rng,
                std::size_t depth = 1);

  // image: [H,W,3] with values in [0,1].
  FeaturePyramid encode(const Tensor& image) const;

  const std::array<Tensor, kStages>& stage_weights() const { return stage_w_; }

 private:
  std::array<Tensor, kStages> stage_w_, stage_b_;
  std::array<std::vector<Tensor>, kStages> extra_w_, extra_b_;
  std::array<Tensor, 3> proj_w_, proj_b_;
};

/// Shared embedding + single-layer LSTM over each phrase, max-pooled across
/// phrases into the global language feature L0.
class PhraseEncoder {
 public:
  PhraseEncoder() = default;
  PhraseEncoder(ParamStore& store, const std::string& prefix, std::size_t vocab_size,
                std::size_t embed_dim, std::size_t hidden, Rng& rng);

  // Final hidden state for one phrase (padding excluded from the recurrence).
  Tensor encode_phrase(const std::vector<int>& tokens, std::size_t length) const;
  Tensor encode(const PhraseSet& phrases) const;

  std::size_t hidden() const { return hidden_; }
  std::size_t vocab_size() const { return vocab_size_; }

 private:
  Tensor embed_, wx_, wh_, b_;
  std::size_t hidden_ = 0;
  std::size_t vocab_size_ = 0;
};

// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize(const std::string& text);

/// Token vocabulary; ids 0 and 1 are PAD and UNK.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);  // tokens[0..1] must be PAD/UNK

  static Vocabulary build(const std::vector<std::string>& phrases);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& token) const;
  // Token ids for a phrase; unknown tokens map to kUnkId and bump *unknown.
  std::vector<int> encode(const std::string& phrase, std::size_t* unknown = nullptr) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace cbce
