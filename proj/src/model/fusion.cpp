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

#include "cbce/fusion.hpp"

#include "cbce/ops.hpp"

namespace cbce {

Tensor spatial_coords(std::size_t height, std::size_t width, Dtype dtype) {
  if (height == 0 || width == 0) throw ShapeError("spatial_coords: grid must be non-empty");
  std::vector<double> values(height * width * kCoordChannels);
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double x_min = -1.0 + 2.0 * static_cast<double>(c) / w;
      const double x_max = -1.0 + 2.0 * static_cast<double>(c + 1) / w;
      const double y_min = -1.0 + 2.0 * static_cast<double>(r) / h;
      const double y_max = -1.0 + 2.0 * static_cast<double>(r + 1) / h;
      double* cell = &values[(r * width + c) * kCoordChannels];
      cell[0] = x_min;
      cell[1] = y_min;
      cell[2] = x_max;
      cell[3] = y_max;
      cell[4] = 0.5 * (x_min + x_max);
      cell[5] = 0.5 * (y_min + y_max);
      cell[6] = 1.0 / w;
      cell[7] = 1.0 / h;
    }
  }
  return Tensor({height, width, kCoordChannels}, std::move(values), dtype);
}

BilinearFusionParams BilinearFusionParams::create(ParamStore& store, const std::string& prefix,
                                                  std::size_t c_i, std::size_t c_l,
                                                  std::size_t rank, std::size_t c_f, Rng& rng) {
  BilinearFusionParams p;
  p.visual_w = store.add_glorot(prefix + ".visual_w", {c_i, rank}, c_i, rank, rng);
  p.visual_b = store.add_constant(prefix + ".visual_b", {rank}, 0.0);
  p.lang_w = store.add_glorot(prefix + ".lang_w", {c_l, rank}, c_l, rank, rng);
  // Starts at 1, so with L0 = 0 the product is the visual projection.
  p.lang_b = store.add_constant(prefix + ".lang_b", {rank}, 1.0);
  p.out_w = store.add_glorot(prefix + ".out_w", {rank, c_f}, rank, c_f, rng);
  p.out_b = store.add_constant(prefix + ".out_b", {c_f}, 0.0);
  return p;
}

Tensor bilinear_fuse(const Tensor& visual, const Tensor& lang, const BilinearFusionParams& params,
                     bool tanh_output) {
  if (visual.rank() != 3) {
    throw ShapeError("bilinear_fuse: visual map must be [H,W,C], got " + shape_string(visual.shape()));
  }
  if (lang.rank() != 1) {
    throw ShapeError("bilinear_fuse: language feature must be a vector, got " +
                     shape_string(lang.shape()));
  }
  Tensor v = ops::linear(visual, params.visual_w, params.visual_b);  // [H,W,R]
  Tensor l = ops::linear(lang, params.lang_w, params.lang_b);        // [R]
  Tensor fused = ops::linear(ops::mul_channel(v, l), params.out_w, params.out_b);
  return tanh_output ? ops::tanh(fused) : fused;
}

std::array<Tensor, 3> build_initial_fused(const FeaturePyramid& pyramid, const Tensor& lang,
                                          const std::array<BilinearFusionParams, 3>& params,
                                          bool tanh_output) {
  const Shape& reference = pyramid.levels[0].shape();
  for (const Tensor& level : pyramid.levels) {
    if (level.shape() != reference) {
      throw ShapeError("build_initial_fused: pyramid levels disagree, " + shape_string(reference) +
                       " vs " + shape_string(level.shape()));
    }
  }
  Tensor coords = spatial_coords(reference[0], reference[1], pyramid.levels[0].dtype());
  std::array<Tensor, 3> fused;
  for (std::size_t l = 0; l < 3; ++l) {
    fused[l] = ops::concat({bilinear_fuse(pyramid.levels[l], lang, params[l], tanh_output), coords}, 2);
  }
  return fused;
}

}  // namespace cbce
