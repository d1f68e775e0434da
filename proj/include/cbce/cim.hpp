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
#include <vector>

#include "cbce/params.hpp"
#include "cbce/tensor.hpp"

// Cyclic interaction between the language feature and the three fused
// visual levels. Level index 0, 1, 2 stands for pyramid stages 3, 4, 5.
namespace cbce {

/// Vision-guided language update.
struct VlmParams {
  Tensor phi_w, phi_b;      // fused -> attention width: [C_v,C], [C]
  Tensor theta_w, theta_b;  // language -> attention width: [C_l,C], [C]
  Tensor out_w, out_b;      // [C_l + C_v, C_l], [C_l]

  static VlmParams create(ParamStore& store, const std::string& prefix, std::size_t c_l,
                          std::size_t c_v, std::size_t attn_width, Rng& rng);
};

/// Intermediate VLM values, exposed for inspection.
struct VlmTrace {
  Tensor scores;     // S, [HW]
  Tensor attention;  // A = Softmax(S / sqrt(C)), [HW]
  Tensor attended;   // A_c, [C_v]
};

/// L_{m+1} = l2_normalize(W [L_m ; A_c] + b), A_c = sum_p A_p F_p.
Tensor vlm(const Tensor& lang, const Tensor& fused, const VlmParams& params,
           VlmTrace* trace = nullptr);

/// Language-gated aggregation for one target level. gate_w/gate_b hold one
/// projection per source level, sources in ascending level order.
struct LvmParams {
  std::array<Tensor, 2> gate_w;  // [C_l,C_v]
  std::array<Tensor, 2> gate_b;  // [C_v]

  static LvmParams create(ParamStore& store, const std::string& prefix, std::size_t target,
                          std::size_t c_l, std::size_t c_v, Rng& rng);
};

/// F^i_{m+1} = F^i_m + sum_t sigmoid(W_t L + b_t) (.) F^t_m over the two
/// other levels t, gates broadcast over space. Throws on index collisions.
Tensor lvm(const Tensor& lang_next, const std::array<Tensor, 3>& fused, std::size_t target,
           std::size_t source_j, std::size_t source_k, const LvmParams& params);

// The two source levels for a target, ascending.
std::array<std::size_t, 2> other_levels(std::size_t target);

/// Parameters for one round: per-level VLM and LVM.
struct CimStage {
  std::array<VlmParams, 3> vlm;
  std::array<LvmParams, 3> lvm;
};

struct CimParams {
  std::vector<CimStage> stages;  // cycles * rounds, cycle-major

  static CimParams create(ParamStore& store, const std::string& prefix, int rounds, int cycles,
                          std::size_t c_l, std::size_t c_v, std::size_t attn_width, Rng& rng);
};

struct CimState {
  std::array<Tensor, 3> lang;
  std::array<Tensor, 3> fused;
  int round = 0;
};

/// One synchronous round: every level's VLM, then every level's LVM reading
/// only the round-m fused features.
CimState cim_round(const CimState& state, const CimStage& stage);

CimState cim_forward(const Tensor& lang0, const std::array<Tensor, 3>& fused0,
                     const CimParams& params, int rounds, int cycles);

}  // namespace cbce
