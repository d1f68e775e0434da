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
#include <cstdint>
#include <memory>
#include <string>

#include "json.hpp"

#include "cbce/cim.hpp"
#include "cbce/encoders.hpp"
#include "cbce/fusion.hpp"
#include "cbce/params.hpp"
#include "cbce/seghead.hpp"

namespace cbce {

struct ModelConfig {
  std::array<std::size_t, 5> backbone_channels{8, 16, 32, 32, 32};
  std::size_t backbone_depth = 1;  // convs per backbone stage
  std::size_t c_i = 32;         // projected visual width
  std::size_t c_l = 32;         // language width (LSTM hidden)
  std::size_t c_f = 32;         // bilinear fusion output width
  std::size_t c_a = 64;         // ASPP width
  std::size_t rank = 16;        // bilinear rank R
  std::size_t embed_dim = 32;
  std::size_t attn_width = 0;   // 0 selects C_v
  int rounds = 2;
  int cycles = 1;
  bool fusion_tanh = true;
  std::size_t vocab_size = 2;
  Dtype dtype = Dtype::kFloat64;

  std::size_t fused_width() const { return c_f + kCoordChannels; }
  std::size_t attention_width() const { return attn_width == 0 ? fused_width() : attn_width; }
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Intermediate values of one forward pass.
struct ForwardTrace {
  FeaturePyramid pyramid;
  Tensor lang0;
  std::array<Tensor, 3> fused0;
  CimState cim;
  Tensor aspp_in;
  Tensor aspp_out;
};

/// The full network: encoders, per-level fusion, the cyclic interaction
/// module and the segmentation head, all parameters in one store.
class CbceNet {
 public:
  static constexpr const char* kBackbonePrefix = "visual";

  CbceNet(const ModelConfig& config, std::uint64_t seed);

  MaskPrediction forward(const Tensor& image, const PhraseSet& phrases,
                         ForwardTrace* trace = nullptr) const;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore> store_;
  VisualEncoder visual_;
  PhraseEncoder phrase_;
  std::array<BilinearFusionParams, 3> fusion_;
  CimParams cim_;
  AsppParams aspp_;
  HeadParams head_;
};

}  // namespace cbce
