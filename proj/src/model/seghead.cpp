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

#include "cbce/seghead.hpp"

#include <cmath>

#include "cbce/ops.hpp"

namespace cbce {

AsppParams AsppParams::create(ParamStore& store, const std::string& prefix, std::size_t c_in,
                              std::size_t c_a, Rng& rng) {
  AsppParams p;
  const double relu_bound = std::sqrt(6.0 / static_cast<double>(c_in));
  p.pool_w = store.add_uniform(prefix + ".pool.w", {c_in, c_a}, relu_bound, rng);
  p.pool_b = store.add_constant(prefix + ".pool.b", {c_a}, 0.0);
  for (std::size_t b = 0; b < 4; ++b) {
    const std::string name = prefix + ".atrous" + std::to_string(p.dilations[b]);
    p.depthwise[b] = store.add_uniform(name + ".depthwise", {3, 3, c_in}, std::sqrt(6.0 / 9.0), rng);
    p.pointwise[b] = store.add_uniform(name + ".pointwise", {1, 1, c_in, c_a}, relu_bound, rng);
    p.pointwise_b[b] = store.add_constant(name + ".pointwise_b", {c_a}, 0.0);
  }
  p.fuse_w = store.add_uniform(prefix + ".fuse.w", {5 * c_a, c_a},
                               std::sqrt(6.0 / static_cast<double>(5 * c_a)), rng);
  p.fuse_b = store.add_constant(prefix + ".fuse.b", {c_a}, 0.0);
  return p;
}

HeadParams HeadParams::create(ParamStore& store, const std::string& prefix, std::size_t c_a,
                              Rng& rng) {
  HeadParams p;
  p.w = store.add_glorot(prefix + ".w", {c_a, 1}, c_a, 1, rng);
  p.b = store.add_constant(prefix + ".b", {1}, 0.0);
  return p;
}

Tensor concat_levels(const std::array<Tensor, 3>& levels) {
  for (const Tensor& t : levels) {
    if (t.shape() != levels[0].shape()) {
      throw ShapeError("concat_levels: shape mismatch " + shape_string(levels[0].shape()) + " vs " +
                       shape_string(t.shape()));
    }
  }
  return ops::concat({levels[0], levels[1], levels[2]}, 2);
}

Tensor aspp(const Tensor& x, const AsppParams& params) {
  if (x.rank() != 3) throw ShapeError("aspp: expected [H,W,C], got " + shape_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<Tensor> branches;
  Tensor pooled = ops::relu(ops::linear(ops::global_avg_pool(x), params.pool_w, params.pool_b));
  branches.push_back(ops::bilinear_upsample(pooled, h, w));
  for (std::size_t b = 0; b < 4; ++b) {
    branches.push_back(ops::relu(ops::depthwise_separable_conv(
        x, params.depthwise[b], params.pointwise[b], params.pointwise_b[b], params.dilations[b])));
  }
  return ops::relu(ops::linear(ops::concat(branches, 2), params.fuse_w, params.fuse_b));
}

MaskPrediction predict_mask(const Tensor& aspp_out, std::size_t image_h, std::size_t image_w,
                            const HeadParams& params) {
  Tensor coarse = ops::linear(aspp_out, params.w, params.b);  // [H,W,1]
  Tensor logits = ops::reshape(ops::bilinear_upsample(coarse, image_h, image_w), {image_h, image_w});
  return {logits, ops::sigmoid(logits)};
}

Tensor bce_loss(const MaskPrediction& prediction, const Tensor& gt) {
  return ops::bce_with_logits(prediction.logits, gt);
}

}  // namespace cbce
