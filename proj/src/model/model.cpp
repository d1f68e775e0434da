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

#include "cbce/model.hpp"

#include <set>

namespace cbce {

void ModelConfig::validate() const {
  for (std::size_t c : backbone_channels)
    if (c == 0) throw ValidationError("model: backbone channel counts must be positive");
  if (backbone_depth == 0) throw ValidationError("model: backbone_depth must be at least 1");
  if (c_i == 0 || c_l == 0 || c_f == 0 || c_a == 0 || rank == 0 || embed_dim == 0) {
    throw ValidationError("model: widths must be positive");
  }
  if (rounds < 1 || cycles < 1) throw ValidationError("model: rounds and cycles must be >= 1");
  if (vocab_size < 2) throw ValidationError("model: vocabulary must hold PAD and UNK");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"backbone_channels", backbone_channels},
          {"backbone_depth", backbone_depth},
          {"c_i", c_i},
          {"c_l", c_l},
          {"c_f", c_f},
          {"c_a", c_a},
          {"rank", rank},
          {"embed_dim", embed_dim},
          {"attn_width", attn_width},
          {"rounds", rounds},
          {"cycles", cycles},
          {"fusion_tanh", fusion_tanh},
          {"vocab_size", vocab_size},
          {"fused_width", fused_width()},
          {"dtype", dtype_name(dtype)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "backbone_channels", "backbone_depth", "c_i",    "c_l",         "c_f",        "c_a",         "rank",  "embed_dim",
      "attn_width",        "rounds", "cycles",      "fusion_tanh", "vocab_size", "dtype", "fused_width"};
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError("model config: unknown key '" + key + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("backbone_channels")) c.backbone_channels = j.at("backbone_channels").get<std::array<std::size_t, 5>>();
    if (j.contains("backbone_depth")) c.backbone_depth = j.at("backbone_depth").get<std::size_t>();
    if (j.contains("c_i")) c.c_i = j.at("c_i").get<std::size_t>();
    if (j.contains("c_l")) c.c_l = j.at("c_l").get<std::size_t>();
    if (j.contains("c_f")) c.c_f = j.at("c_f").get<std::size_t>();
    if (j.contains("c_a")) c.c_a = j.at("c_a").get<std::size_t>();
    if (j.contains("rank")) c.rank = j.at("rank").get<std::size_t>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("attn_width")) c.attn_width = j.at("attn_width").get<std::size_t>();
    if (j.contains("rounds")) c.rounds = j.at("rounds").get<int>();
    if (j.contains("cycles")) c.cycles = j.at("cycles").get<int>();
    if (j.contains("fusion_tanh")) c.fusion_tanh = j.at("fusion_tanh").get<bool>();
    if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (j.contains("dtype")) c.dtype = parse_dtype(j.at("dtype").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  if (j.contains("fused_width") && j.at("fused_width").get<std::size_t>() != c.fused_width()) {
    throw ValidationError("model config: recorded fused width disagrees with c_f");
  }
  c.validate();
  return c;
}

CbceNet::CbceNet(const ModelConfig& config, std::uint64_t seed)
    : config_(config), store_(std::make_unique<ParamStore>(config.dtype)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t c_v = config_.fused_width();
  visual_ = VisualEncoder(*store_, kBackbonePrefix, config_.backbone_channels, config_.c_i, rng,
                          config_.backbone_depth);
  phrase_ = PhraseEncoder(*store_, "phrase", config_.vocab_size, config_.embed_dim, config_.c_l, rng);
  for (std::size_t l = 0; l < 3; ++l) {
    fusion_[l] = BilinearFusionParams::create(*store_, "fusion.l" + std::to_string(l + 3), config_.c_i,
                                              config_.c_l, config_.rank, config_.c_f, rng);
  }
  cim_ = CimParams::create(*store_, "cim", config_.rounds, config_.cycles, config_.c_l, c_v,
                           config_.attention_width(), rng);
  aspp_ = AsppParams::create(*store_, "aspp", 3 * c_v, config_.c_a, rng);
  head_ = HeadParams::create(*store_, "head", config_.c_a, rng);
}

MaskPrediction CbceNet::forward(const Tensor& image, const PhraseSet& phrases,
                                ForwardTrace* trace) const {
  FeaturePyramid pyramid = visual_.encode(image);
  Tensor lang0 = phrase_.encode(phrases);
  std::array<Tensor, 3> fused0 = build_initial_fused(pyramid, lang0, fusion_, config_.fusion_tanh);
  CimState state = cim_forward(lang0, fused0, cim_, config_.rounds, config_.cycles);
  Tensor aspp_in = concat_levels(state.fused);
  Tensor aspp_out = aspp(aspp_in, aspp_);
  MaskPrediction prediction = predict_mask(aspp_out, image.dim(0), image.dim(1), head_);
  if (trace) *trace = ForwardTrace{pyramid, lang0, fused0, state, aspp_in, aspp_out};
  return prediction;
}

}  // namespace cbce
