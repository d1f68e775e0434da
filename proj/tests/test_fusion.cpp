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
#include "cbce/gradcheck_suite.hpp"
#include "cbce/ops.hpp"
#include "doctest.h"

using namespace cbce;

namespace {

std::vector<double> cell(const Tensor& grid, std::size_t r, std::size_t c) {
  const std::size_t w = grid.dim(1);
  const auto d = grid.data().subspan((r * w + c) * kCoordChannels, kCoordChannels);
  return {d.begin(), d.end()};
}

void zero_biases(BilinearFusionParams& p) {
  for (Tensor* b : {&p.visual_b, &p.lang_b, &p.out_b})
    for (double& v : b->mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("coordinate grid layout") {
  CHECK(cell(spatial_coords(1, 1), 0, 0) == std::vector<double>{-1, -1, 1, 1, 0, 0, 1, 1});

  const Tensor g = spatial_coords(4, 4);
  CHECK(g.shape() == Shape{4, 4, 8});
  const auto tl = cell(g, 0, 0);
  CHECK(tl[0] == -1.0);
  CHECK(tl[1] == -1.0);
  // Row 1, column 2 of a 4x4 grid.
  CHECK(cell(g, 1, 2) == std::vector<double>{0.0, -0.5, 0.5, 0.0, 0.25, -0.25, 0.25, 0.25});

  const Tensor r = spatial_coords(3, 5);
  for (std::size_t i = 0; i < r.numel(); ++i) {
    CHECK(r[i] >= -1.0);
    CHECK(r[i] <= 1.0);
  }
  const std::vector<double> expected{0.6, 1.0 / 3.0, 1.0, 1.0, 0.8, 2.0 / 3.0, 0.2, 1.0 / 3.0};
  const auto got = cell(r, 2, 4);
  for (std::size_t k = 0; k < 8; ++k) CHECK(got[k] == doctest::Approx(expected[k]).epsilon(1e-15));
  CHECK(bit_equal(spatial_coords(7, 3), spatial_coords(7, 3)));
  CHECK_THROWS_AS(spatial_coords(0, 3), ShapeError);
}

TEST_CASE("bilinear fusion is zero for a zero language feature with zero biases") {
  Rng rng(1);
  ParamStore store;
  auto p = BilinearFusionParams::create(store, "f", 4, 3, 5, 6, rng);
  zero_biases(p);
  const Tensor out = bilinear_fuse(random_uniform({3, 3, 4}, -1, 1, rng), Tensor::zeros({3}), p);
  CHECK(out.shape() == Shape{3, 3, 6});
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("bilinear fusion with a linear output scales with each argument") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    ParamStore store;
    auto p = BilinearFusionParams::create(store, "f", 4, 3, 5, 6, rng);
    zero_biases(p);
    const Tensor v = random_uniform({2, 3, 4}, -1, 1, rng);
    const Tensor l = random_uniform({3}, -1, 1, rng);
    const double alpha = rng.uniform(-3.0, 3.0);
    const Tensor base = bilinear_fuse(v, l, p, false);
    const Tensor by_lang = bilinear_fuse(v, ops::scale(l, alpha), p, false);
    const Tensor by_vis = bilinear_fuse(ops::scale(v, alpha), l, p, false);
    for (std::size_t i = 0; i < base.numel(); ++i) {
      CHECK(by_lang[i] == doctest::Approx(alpha * base[i]).epsilon(1e-12));
      CHECK(by_vis[i] == doctest::Approx(alpha * base[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("bilinear fusion gradients match finite differences") {
  CHECK(run_gradient_suite("bilinear_fuse", 0, 5).front().passed == 5);
}

TEST_CASE("initial fused features append the coordinate grid") {
  Rng rng(3);
  ParamStore store;
  std::array<BilinearFusionParams, 3> params;
  for (std::size_t l = 0; l < 3; ++l)
    params[l] = BilinearFusionParams::create(store, "f" + std::to_string(l), 32, 32, 16, 32, rng);
  FeaturePyramid pyramid;
  for (auto& level : pyramid.levels) level = random_uniform({10, 10, 32}, -1, 1, rng);
  const Tensor l0 = random_uniform({32}, -1, 1, rng);
  const Tensor l1 = random_uniform({32}, -1, 1, rng);
  const auto fused = build_initial_fused(pyramid, l0, params);
  const auto fused_other = build_initial_fused(pyramid, l1, params);
  const Tensor coords = spatial_coords(10, 10);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(fused[l].shape() == Shape{10, 10, 40});
    CHECK(bit_equal(ops::slice(fused[l], 2, 32, 40), coords));
    CHECK(bit_equal(ops::slice(fused_other[l], 2, 32, 40), coords));
    CHECK_FALSE(bit_equal(ops::slice(fused[l], 2, 0, 32), ops::slice(fused_other[l], 2, 0, 32)));
  }
  pyramid.levels[1] = random_uniform({10, 9, 32}, -1, 1, rng);
  CHECK_THROWS_AS(build_initial_fused(pyramid, l0, params), ShapeError);
}

TEST_CASE("initial fusion is bilinear in the visual map and language feature without tanh") {
  Rng rng(4);
  ParamStore store;
  std::array<BilinearFusionParams, 3> params;
  for (std::size_t l = 0; l < 3; ++l) {
    params[l] = BilinearFusionParams::create(store, "f" + std::to_string(l), 5, 4, 3, 5, rng);
    zero_biases(params[l]);
  }
  auto pyramid_of = [](const Tensor& t) {
    FeaturePyramid p;
    p.levels = {t, ops::scale(t, 0.5), ops::scale(t, -2.0)};
    return p;
  };
  const Tensor v1 = random_uniform({3, 3, 5}, -1, 1, rng), v2 = random_uniform({3, 3, 5}, -1, 1, rng);
  const Tensor la = random_uniform({4}, -1, 1, rng), lb = random_uniform({4}, -1, 1, rng);
  const double a = 0.7, b = -1.3;
  const Tensor v_mix = ops::add(ops::scale(v1, a), ops::scale(v2, b));
  const Tensor l_mix = ops::add(ops::scale(la, a), ops::scale(lb, b));
  const auto f_vmix = build_initial_fused(pyramid_of(v_mix), la, params, false);
  const auto f_v1 = build_initial_fused(pyramid_of(v1), la, params, false);
  const auto f_v2 = build_initial_fused(pyramid_of(v2), la, params, false);
  const auto f_lmix = build_initial_fused(pyramid_of(v1), l_mix, params, false);
  const auto f_lb = build_initial_fused(pyramid_of(v1), lb, params, false);
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t ch = 0; ch < 5; ++ch) {
          const std::size_t i = (r * 3 + c) * 13 + ch;
          CHECK(f_vmix[l][i] == doctest::Approx(a * f_v1[l][i] + b * f_v2[l][i]).epsilon(1e-12));
          CHECK(f_lmix[l][i] == doctest::Approx(a * f_v1[l][i] + b * f_lb[l][i]).epsilon(1e-12));
        }
      }
    }
  }
}
