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

#include "cbce/cim.hpp"

#include <cmath>

#include "cbce/ops.hpp"

namespace cbce {

VlmParams VlmParams::create(ParamStore& store, const std::string& prefix, std::size_t c_l,
                            std::size_t c_v, std::size_t attn_width, Rng& rng) {
  VlmParams p;
  p.phi_w = store.add_glorot(prefix + ".phi_w", {c_v, attn_width}, c_v, attn_width, rng);
  p.phi_b = store.add_constant(prefix + ".phi_b", {attn_width}, 0.0);
  p.theta_w = store.add_glorot(prefix + ".theta_w", {c_l, attn_width}, c_l, attn_width, rng);
  p.theta_b = store.add_constant(prefix + ".theta_b", {attn_width}, 0.0);
  p.out_w = store.add_glorot(prefix + ".out_w", {c_l + c_v, c_l}, c_l + c_v, c_l, rng);
  p.out_b = store.add_constant(prefix + ".out_b", {c_l}, 0.0);
  return p;
}

Tensor vlm(const Tensor& lang, const Tensor& fused, const VlmParams& params, VlmTrace* trace) {
  if (fused.rank() != 3) throw ShapeError("vlm: fused feature must be [H,W,C_v], got " + shape_string(fused.shape()));
  if (lang.rank() != 1) throw ShapeError("vlm: language feature must be a vector");
  const std::size_t hw = fused.dim(0) * fused.dim(1);
  const std::size_t c_v = fused.dim(2);
  const std::size_t width = params.phi_w.dim(1);

  Tensor keys = ops::reshape(ops::linear(fused, params.phi_w, params.phi_b), {hw, width});
  Tensor query = ops::reshape(ops::linear(lang, params.theta_w, params.theta_b), {width, 1});
  Tensor scores = ops::reshape(ops::matmul(keys, query), {hw});
  Tensor attention = ops::softmax(scores, std::sqrt(static_cast<double>(width)));
  Tensor attended = ops::reshape(
      ops::matmul(ops::reshape(attention, {1, hw}), ops::reshape(fused, {hw, c_v})), {c_v});
  if (trace) *trace = VlmTrace{scores, attention, attended};
  return ops::l2_normalize(ops::linear(ops::concat({lang, attended}, 0), params.out_w, params.out_b));
}

std::array<std::size_t, 2> other_levels(std::size_t target) {
  switch (target) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    case 2: return {0, 1};
    default: throw ValidationError("level index " + std::to_string(target) + " out of range");
  }
}

LvmParams LvmParams::create(ParamStore& store, const std::string& prefix, std::size_t target,
                            std::size_t c_l, std::size_t c_v, Rng& rng) {
  LvmParams p;
  const auto sources = other_levels(target);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::string name = prefix + ".gate_from" + std::to_string(sources[s] + 3);
    p.gate_w[s] = store.add_glorot(name + ".w", {c_l, c_v}, c_l, c_v, rng);
    // sigmoid(-2) ~ 0.12: gates start mostly closed.
    p.gate_b[s] = store.add_constant(name + ".b", {c_v}, -2.0);
  }
  return p;
}

Tensor lvm(const Tensor& lang_next, const std::array<Tensor, 3>& fused, std::size_t target,
           std::size_t source_j, std::size_t source_k, const LvmParams& params) {
  if (target > 2 || source_j > 2 || source_k > 2) throw ValidationError("lvm: level index out of range");
  if (target == source_j || target == source_k || source_j == source_k) {
    throw ValidationError("lvm: level indices must be distinct, got target " +
                          std::to_string(target) + " with sources " + std::to_string(source_j) +
                          ", " + std::to_string(source_k));
  }
  const auto expected = other_levels(target);
  Tensor out = fused[target];
  for (std::size_t source : {source_j, source_k}) {
    const std::size_t slot = source == expected[0] ? 0 : 1;
    Tensor gate = ops::sigmoid(ops::linear(lang_next, params.gate_w[slot], params.gate_b[slot]));
    out = ops::add(out, ops::mul_channel(fused[source], gate));
  }
  return out;
}

CimParams CimParams::create(ParamStore& store, const std::string& prefix, int rounds, int cycles,
                            std::size_t c_l, std::size_t c_v, std::size_t attn_width, Rng& rng) {
  if (rounds < 1 || cycles < 1) throw ValidationError("cim: rounds and cycles must be >= 1");
  CimParams params;
  for (int c = 0; c < cycles; ++c) {
    for (int r = 0; r < rounds; ++r) {
      CimStage stage;
      for (std::size_t l = 0; l < 3; ++l) {
        const std::string name = prefix + ".c" + std::to_string(c) + ".r" + std::to_string(r) +
                                 ".l" + std::to_string(l + 3);
        stage.vlm[l] = VlmParams::create(store, name + ".vlm", c_l, c_v, attn_width, rng);
        stage.lvm[l] = LvmParams::create(store, name + ".lvm", l, c_l, c_v, rng);
      }
      params.stages.push_back(std::move(stage));
    }
  }
  return params;
}

CimState cim_round(const CimState& state, const CimStage& stage) {
  CimState next;
  next.round = state.round + 1;
  for (std::size_t l = 0; l < 3; ++l) next.lang[l] = vlm(state.lang[l], state.fused[l], stage.vlm[l]);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto sources = other_levels(l);
    next.fused[l] = lvm(next.lang[l], state.fused, l, sources[0], sources[1], stage.lvm[l]);
  }
  return next;
}

CimState cim_forward(const Tensor& lang0, const std::array<Tensor, 3>& fused0,
                     const CimParams& params, int rounds, int cycles) {
  if (rounds < 1 || cycles < 1) throw ValidationError("cim: rounds and cycles must be >= 1");
  if (params.stages.size() != static_cast<std::size_t>(rounds * cycles)) {
    throw ValidationError("cim: parameters hold " + std::to_string(params.stages.size()) +
                          " stages, schedule needs " + std::to_string(rounds * cycles));
  }
  CimState state{{lang0, lang0, lang0}, fused0, 0};
  for (const CimStage& stage : params.stages) state = cim_round(state, stage);
  return state;
}

}  // namespace cbce
