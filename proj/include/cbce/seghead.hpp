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

#include "cbce/params.hpp"
#include "cbce/tensor.hpp"

namespace cbce {

inline constexpr std::array<int, 4> kAsppDilations{1, 3, 7, 11};

/// Atrous spatial pyramid pooling: a global-pooling branch plus four
/// depthwise-separable 3x3 branches, each C_a wide with ReLU, fused by a
/// 1x1 conv (+ReLU) to C_a.
struct AsppParams {
  Tensor pool_w, pool_b;                 // [C_in,C_a], [C_a]
  std::array<Tensor, 4> depthwise;       // [3,3,C_in]
  std::array<Tensor, 4> pointwise;       // [1,1,C_in,C_a]
  std::array<Tensor, 4> pointwise_b;     // [C_a]
  Tensor fuse_w, fuse_b;                 // [5 C_a, C_a], [C_a]
  std::array<int, 4> dilations = kAsppDilations;

  static AsppParams create(ParamStore& store, const std::string& prefix, std::size_t c_in,
                           std::size_t c_a, Rng& rng);
};

struct HeadParams {
  Tensor w, b;  // [C_a,1], [1]

  static HeadParams create(ParamStore& store, const std::string& prefix, std::size_t c_a, Rng& rng);
};

struct MaskPrediction {
  Tensor logits;  // [H_img,W_img]
  Tensor probs;   // sigmoid(logits)
};

// Channel concatenation in level order 3, 4, 5.
Tensor concat_levels(const std::array<Tensor, 3>& levels);

Tensor aspp(const Tensor& x, const AsppParams& params);

// 1x1 conv to one channel, bilinear upsample to the image size, sigmoid.
MaskPrediction predict_mask(const Tensor& aspp_out, std::size_t image_h, std::size_t image_w,
                            const HeadParams& params);

// Summed BCE over pixels from the logits; gt must be binary.
Tensor bce_loss(const MaskPrediction& prediction, const Tensor& gt);

}  // namespace cbce
