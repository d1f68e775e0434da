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

#include <span>
#include <vector>

#include "cbce/graph.hpp"
#include "cbce/tensor.hpp"

// Differentiable operations. Feature maps are H x W x C, row-major.
// Every op records a backward rule into the active graph (if any).
namespace cbce::ops {

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

// Same-shape elementwise arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Broadcast a [C] vector over the trailing axis of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul_channel(const Tensor& x, const Tensor& gate);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Softmax(x / scale) over a 1-D tensor, max-subtracted.
Tensor softmax(const Tensor& x, double scale = 1.0);

// x / sqrt(|x|^2 + eps)
inline constexpr double kL2Epsilon = 1e-12;
Tensor l2_normalize(const Tensor& x, double eps = kL2Epsilon);

// [H,W,C] -> [1,1,C]
Tensor global_avg_pool(const Tensor& x);

// Elementwise maximum across same-shape tensors; ties route the gradient
// to the first maximal input.
Tensor elementwise_max(const std::vector<Tensor>& xs);

// Bilinear resampling of [H,W,C] to [out_h,out_w,C] with half-pixel
// (align_corners = false) coordinates.
Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Dilated cross-correlation with "same" padding dilation*(k-1)/2 per side.
// x: [H,W,Cin], weight: [k,k,Cin,Cout], bias: [Cout].
// Output is [ceil(H/stride), ceil(W/stride), Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int dilation = 1,
              int stride = 1);

// Per-channel k x k filtering. x: [H,W,C], weight: [k,k,C].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, int dilation = 1);

// depthwise_conv2d followed by a 1x1 conv2d. pointwise: [1,1,Cin,Cout];
// pointwise_bias may be undefined (treated as zero).
Tensor depthwise_separable_conv(const Tensor& x, const Tensor& depthwise,
                                const Tensor& pointwise, const Tensor& pointwise_bias,
                                int dilation);

// Position-wise affine map over the trailing axis: [..., Cin] -> [..., Cout].
// weight: [Cin,Cout], bias: [Cout] (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Row gather from a [V,D] table -> [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);

// Summed binary cross-entropy with logits. target must be {0,1}-valued.
// The value matches clamping p to [eps, 1-eps]; the gradient is the
// unclamped sigmoid(z) - g.
inline constexpr double kBceEpsilon = 1e-7;
Tensor bce_with_logits(const Tensor& logits, const Tensor& target, double eps = kBceEpsilon);

}  // namespace cbce::ops
