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

#include "cbce/encoders.hpp"
#include "cbce/params.hpp"
#include "cbce/tensor.hpp"

namespace cbce {

inline constexpr std::size_t kCoordChannels = 8;

/// 8-channel coordinate map [H,W,8]. Per cell (r, c):
///   [x_min, y_min, x_max, y_max, x_center, y_center, 1/W, 1/H]
/// with x/y the cell extents normalized to [-1, 1].
Tensor spatial_coords(std::size_t height, std::size_t width, Dtype dtype = Dtype::kFloat64);

/// Rank-R Hadamard bilinear pooling parameters.
struct BilinearFusionParams {
  Tensor visual_w, visual_b;  // [C_I,R], [R]
  Tensor lang_w, lang_b;      // [C_l,R], [R]
  Tensor out_w, out_b;        // [R,C_f], [C_f]

  static BilinearFusionParams create(ParamStore& store, const std::string& prefix, std::size_t c_i,
                                     std::size_t c_l, std::size_t rank, std::size_t c_f, Rng& rng);
};

/// tanh(W_o((W_v v + b_v) * (W_l L0 + b_l)) + b_o) at every position.
/// With tanh_output = false the output stage is linear.
Tensor bilinear_fuse(const Tensor& visual, const Tensor& lang, const BilinearFusionParams& params,
                     bool tanh_output = true);

/// F^i_0 = concat(fuse_i(I_i, L0), coords) for the three pyramid levels.
std::array<Tensor, 3> build_initial_fused(const FeaturePyramid& pyramid, const Tensor& lang,
                                          const std::array<BilinearFusionParams, 3>& params,
                                          bool tanh_output = true);

}  // namespace cbce
