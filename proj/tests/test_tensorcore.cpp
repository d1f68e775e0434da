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

#include <cmath>
#include <numeric>

#include "cbce/gradcheck.hpp"
#include "cbce/graph.hpp"
#include "cbce/ops.hpp"
#include "cbce/rng.hpp"
#include "doctest.h"

using namespace cbce;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_uniform(std::move(shape), lo, hi, rng);
}

// sum(out * probe) with a fixed random probe, to give every output entry a
// distinct upstream gradient.
Tensor probe_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(out, rand_tensor(out.shape(), rng)));
}

// Direct zero-padded dilated cross-correlation.
std::vector<double> naive_conv(const std::vector<double>& x, int h, int w, int cin,
                               const std::vector<double>& wt, int k, int cout,
                               const std::vector<double>& bias, int dil) {
  const int pad = dil * (k - 1) / 2;
  const int ph = h + 2 * pad, pw = w + 2 * pad;
  std::vector<double> padded(static_cast<std::size_t>(ph * pw * cin), 0.0);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int c = 0; c < cin; ++c)
        padded[((y + pad) * pw + xx + pad) * cin + c] = x[(y * w + xx) * cin + c];
  std::vector<double> out(static_cast<std::size_t>(h * w * cout));
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int co = 0; co < cout; ++co) {
        double s = bias[co];
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            for (int ci = 0; ci < cin; ++ci)
              s += padded[((y + ky * dil) * pw + xx + kx * dil) * cin + ci] *
                   wt[((ky * k + kx) * cin + ci) * cout + co];
        out[(y * w + xx) * cout + co] = s;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor construction validates shape and data length") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), ShapeError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(1) == 3);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("float32 tensors round stored values") {
  Tensor t({1}, {0.1}, Dtype::kFloat32);
  CHECK(t[0] == static_cast<double>(0.1f));
  Tensor y = ops::scale(t, 3.0);
  CHECK(y[0] == static_cast<double>(static_cast<float>(3.0 * static_cast<double>(0.1f))));
  CHECK(parse_dtype("float32") == Dtype::kFloat32);
  CHECK_THROWS_AS(parse_dtype("int8"), ValidationError);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Rng rng(1);
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(bit_equal(ops::matmul(eye, x), x));
  }
  SUBCASE("zeros") {
    Rng rng(2);
    Tensor out = ops::matmul(Tensor::zeros({2, 3}), rand_tensor({3, 4}, rng));
    CHECK(out.shape() == Shape{2, 4});
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("2x2 value and gradients") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {5, 6, 7, 8});
    Tensor c = ops::matmul(a, b);
    CHECK(c[0] == 19);
    CHECK(c[1] == 22);
    CHECK(c[2] == 43);
    CHECK(c[3] == 50);
    auto report = grad_check(
        [](const std::vector<Tensor>& in) { return probe_sum(ops::matmul(in[0], in[1]), 7); },
        {a, b}, 1e-4, 1e-5);
    CHECK(report.passed);
    CHECK(report.checked == 8);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 identity kernel") {
    Rng rng(3);
    Tensor x = rand_tensor({4, 5, 3}, rng);
    std::vector<double> w(9, 0.0);
    w[0] = w[4] = w[8] = 1.0;
    Tensor out = ops::conv2d(x, Tensor({1, 1, 3, 3}, w), Tensor::zeros({3}));
    CHECK(bit_equal(out, x));
  }
  SUBCASE("zero weights give the bias") {
    Rng rng(4);
    Tensor x = rand_tensor({3, 3, 2}, rng);
    Tensor out = ops::conv2d(x, Tensor::zeros({3, 3, 2, 2}), Tensor({2}, {0.5, -1.5}), 2);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == (i % 2 == 0 ? 0.5 : -1.5));
  }
  SUBCASE("5x5 input, 3x3 kernel, dilation 3 matches nested loops") {
    Rng rng(5);
    Tensor x = rand_tensor({5, 5, 2}, rng);
    Tensor w = rand_tensor({3, 3, 2, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    Tensor out = ops::conv2d(x, w, b, 3);
    auto expected = naive_conv({x.data().begin(), x.data().end()}, 5, 5, 2,
                               {w.data().begin(), w.data().end()}, 3, 3,
                               {b.data().begin(), b.data().end()}, 3);
    REQUIRE(out.shape() == Shape{5, 5, 3});
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
  SUBCASE("stride 2 keeps every other output of the dense result") {
    Rng rng(6);
    Tensor x = rand_tensor({5, 4, 2}, rng);
    Tensor w = rand_tensor({3, 3, 2, 2}, rng);
    Tensor b = rand_tensor({2}, rng);
    Tensor dense = ops::conv2d(x, w, b);
    Tensor strided = ops::conv2d(x, w, b, 1, 2);
    REQUIRE(strided.shape() == Shape{3, 2, 2});
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t xx = 0; xx < 2; ++xx)
        for (std::size_t c = 0; c < 2; ++c)
          CHECK(strided[(y * 2 + xx) * 2 + c] == dense[((2 * y) * 4 + 2 * xx) * 2 + c]);
  }
  SUBCASE("errors") {
    Tensor x = Tensor::zeros({3, 3, 1});
    CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({2, 2, 1, 1}), Tensor::zeros({1})), ValidationError);
    CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({3, 3, 1, 1}), Tensor::zeros({1}), 0), ValidationError);
    CHECK_THROWS_AS(ops::depthwise_conv2d(x, Tensor::zeros({4, 4, 1})), ValidationError);
  }
}

TEST_CASE("depthwise separable conv") {
  SUBCASE("delta kernels and identity pointwise are an identity") {
    Rng rng(8);
    Tensor x = rand_tensor({4, 4, 2}, rng);
    std::vector<double> dw(18, 0.0);
    dw[4 * 2 + 0] = dw[4 * 2 + 1] = 1.0;  // centre tap
    Tensor out = ops::depthwise_separable_conv(x, Tensor({3, 3, 2}, dw),
                                               Tensor({1, 1, 2, 2}, {1, 0, 0, 1}), Tensor(), 3);
    CHECK(bit_equal(out, x));
  }
  SUBCASE("equals conv2d with the materialized separable kernel") {
    Rng rng(9);
    const int dil = 2;
    Tensor x = rand_tensor({4, 4, 2}, rng);
    Tensor dw = rand_tensor({3, 3, 2}, rng);
    Tensor pw = rand_tensor({1, 1, 2, 3}, rng);
    // full[ky,kx,ci,co] = dw[ky,kx,ci] * pw[ci,co]
    std::vector<double> full(3 * 3 * 2 * 3);
    for (int t = 0; t < 9; ++t)
      for (int ci = 0; ci < 2; ++ci)
        for (int co = 0; co < 3; ++co) full[(t * 2 + ci) * 3 + co] = dw[t * 2 + ci] * pw[ci * 3 + co];
    Tensor expected = ops::conv2d(x, Tensor({3, 3, 2, 3}, full), Tensor::zeros({3}), dil);
    Tensor out = ops::depthwise_separable_conv(x, dw, pw, Tensor(), dil);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
  SUBCASE("gradient check on a 3x3x2 input") {
    Rng rng(10);
    auto report = grad_check(
        [](const std::vector<Tensor>& in) {
          return probe_sum(ops::depthwise_separable_conv(in[0], in[1], in[2], in[3], 1), 11);
        },
        {rand_tensor({3, 3, 2}, rng), rand_tensor({3, 3, 2}, rng), rand_tensor({1, 1, 2, 2}, rng),
         rand_tensor({2}, rng)});
    CHECK(report.passed);
  }
}

TEST_CASE("softmax") {
  SUBCASE("zero input is uniform") {
    Tensor y = ops::softmax(Tensor::zeros({5}), 2.0);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("shift invariance") {
    Rng rng(12);
    Tensor x = rand_tensor({6}, rng);
    Tensor shifted = ops::add(x, Tensor::full({6}, 123.0));
    Tensor a = ops::softmax(x, 1.5), b = ops::softmax(shifted, 1.5);
    for (std::size_t i = 0; i < 6; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
  SUBCASE("[1,2,3] with scale sqrt(3)") {
    const double s = std::sqrt(3.0);
    Tensor y = ops::softmax(Tensor({3}, {1, 2, 3}), s);
    const double e0 = std::exp((1 - 3) / s), e1 = std::exp((2 - 3) / s), e2 = 1.0;
    const double z = e0 + e1 + e2;
    CHECK(y[0] == doctest::Approx(e0 / z).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(e1 / z).epsilon(1e-14));
    CHECK(y[2] == doctest::Approx(e2 / z).epsilon(1e-14));
  }
  SUBCASE("large inputs stay finite") {
    Tensor y = ops::softmax(Tensor({2}, {1000.0, 999.0}));
    CHECK(y[0] + y[1] == doctest::Approx(1.0));
  }
}

TEST_CASE("property: softmax sums to one and is shift invariant") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + rng.uniform_int(std::size_t{20});
    Tensor x = rand_tensor({n}, rng, -20.0, 20.0);
    const double scale = rng.uniform(0.1, 5.0);
    Tensor y = ops::softmax(x, scale);
    double total = 0.0;
    for (double v : y.data()) {
      CHECK(v > 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
    Tensor ys = ops::softmax(ops::add(x, Tensor::full({n}, rng.uniform(-50, 50))), scale);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(ys[i] - y[i]) <= 1e-9);
  }
}

TEST_CASE("elementwise helpers") {
  Tensor l2 = ops::l2_normalize(Tensor({2}, {3, 4}));
  CHECK(l2[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(l2[1] == doctest::Approx(0.8).epsilon(1e-12));
  Tensor zero = ops::l2_normalize(Tensor::zeros({4}));
  for (double v : zero.data()) CHECK(v == 0.0);

  Tensor s = ops::sigmoid(Tensor::zeros({2, 2}));
  for (double v : s.data()) CHECK(v == 0.5);

  Rng rng(13);
  Tensor x = rand_tensor({3, 2}, rng);
  CHECK(bit_equal(ops::elementwise_max({x, x, x}), x));

  Tensor pooled = ops::global_avg_pool(Tensor({2, 1, 2}, {1, 10, 3, 20}));
  CHECK(pooled.shape() == Shape{1, 1, 2});
  CHECK(pooled[0] == 2.0);
  CHECK(pooled[1] == 15.0);

  CHECK_THROWS_AS(ops::concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}, 1), ShapeError);
}

TEST_CASE("property: concat then slice is identity") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t axis = rng.uniform_int(std::size_t{3});
    Shape sa{2 + rng.uniform_int(std::size_t{3}), 2 + rng.uniform_int(std::size_t{3}), 2};
    Shape sb = sa;
    sb[axis] = 1 + rng.uniform_int(std::size_t{4});
    Tensor a = rand_tensor(sa, rng), b = rand_tensor(sb, rng);
    Tensor c = ops::concat({a, b}, axis);
    CHECK(bit_equal(ops::slice(c, axis, 0, sa[axis]), a));
    CHECK(bit_equal(ops::slice(c, axis, sa[axis], sa[axis] + sb[axis]), b));
  }
}

TEST_CASE("bilinear upsample") {
  SUBCASE("2x2 checkerboard to 4x4") {
    Tensor cb({2, 2, 1}, {1, 0, 0, 1});
    Tensor up = ops::bilinear_upsample(cb, 4, 4);
    // Half-pixel sampling: per-axis weights (1,0) (.75,.25) (.25,.75) (0,1).
    const double expected[16] = {1,   .75,  .25,  0,   .75, .625, .375, .25,
                                 .25, .375, .625, .75, 0,   .25,  .75,  1};
    for (int i = 0; i < 16; ++i) CHECK(up[i] == doctest::Approx(expected[i]).epsilon(1e-15));
  }
  SUBCASE("constant map stays constant") {
    Tensor up = ops::bilinear_upsample(Tensor::full({3, 2, 2}, 0.7), 7, 9);
    for (double v : up.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
    Tensor from_one = ops::bilinear_upsample(Tensor({1, 1, 2}, {2, 3}), 3, 3);
    for (std::size_t i = 0; i < from_one.numel(); ++i) CHECK(from_one[i] == doctest::Approx(i % 2 ? 3.0 : 2.0).epsilon(1e-15));
  }
}

TEST_CASE("bce_with_logits") {
  SUBCASE("p = 0.5 gives HW ln 2") {
    Tensor g({3, 3}, {1, 0, 1, 0, 0, 1, 1, 1, 0});
    CHECK(ops::bce_with_logits(Tensor::zeros({3, 3}), g).item() ==
          doctest::Approx(9 * std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("non-binary target") {
    CHECK_THROWS_AS(ops::bce_with_logits(Tensor::zeros({2}), Tensor({2}, {0.5, 1.0})),
                    ValidationError);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    Tensor x = Tensor({3}, {1, -2, 5}).set_requires_grad(true);
    Graph graph;
    {
      GraphScope scope(graph);
      graph.backward(ops::sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum(x*x)/2 gives x, with multi-use accumulation") {
    Tensor x = Tensor({4}, {1, -2, 0.5, 3}).set_requires_grad(true);
    Graph graph;
    GraphScope scope(graph);
    Tensor loss = ops::scale(ops::sum(ops::mul(x, x)), 0.5);
    backward(loss, graph);
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == x[i]);
  }
  SUBCASE("non-scalar loss and second backward are errors") {
    Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
    Graph graph;
    GraphScope scope(graph);
    Tensor y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(graph.backward(y), GraphError);
    Tensor loss = ops::sum(y);
    graph.backward(loss);
    CHECK(graph.consumed());
    CHECK_THROWS_AS(graph.backward(loss), GraphError);
  }
  SUBCASE("graph records in topological order") {
    Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
    Graph graph;
    GraphScope scope(graph);
    Tensor y = ops::tanh(ops::scale(x, 2.0));
    Tensor loss = ops::sum(y);
    REQUIRE(graph.size() == 3);
    CHECK(graph.nodes()[0].op == "scale");
    CHECK(graph.nodes()[1].inputs[0].same(graph.nodes()[0].output));
    CHECK(graph.nodes()[2].inputs[0].same(graph.nodes()[1].output));
  }
  SUBCASE("no recording without an active graph or without grad inputs") {
    Tensor x = Tensor({2}, {1, 2});
    Graph graph;
    GraphScope scope(graph);
    ops::sum(x);
    CHECK(graph.size() == 0);
  }
}

TEST_CASE("non-finite values fail fast and name the op") {
  try {
    ops::softmax(Tensor({2}, {1.0, std::nan("")}));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("softmax") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::scale(Tensor({1}, {1e308}), 10.0), NumericError);
}

TEST_CASE("grad_check") {
  Rng rng(21);
  SUBCASE("softmax after matmul") {
    auto report = grad_check(
        [](const std::vector<Tensor>& in) {
          Tensor v = ops::reshape(ops::matmul(in[0], in[1]), {4});
          return probe_sum(ops::softmax(v, 1.3), 3);
        },
        {rand_tensor({2, 3}, rng), rand_tensor({3, 2}, rng)}, 1e-4, 1e-4);
    CHECK(report.passed);
  }
  SUBCASE("wrong backward rule is caught") {
    // square with a deliberately wrong derivative (x instead of 2x)
    auto bad_square = [](const Tensor& x) {
      Tensor out = Tensor::zeros(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_data()[i] = x[i] * x[i];
      return record_op("bad_square", {x}, out, [x](std::span<const double> g) {
        auto gx = Tensor(x).ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * x[i];
      });
    };
    auto report = grad_check(
        [&](const std::vector<Tensor>& in) { return ops::sum(bad_square(in[0])); },
        {rand_tensor({3}, rng, 0.5, 1.0)});
    CHECK_FALSE(report.passed);
    CHECK(report.max_rel_error > 0.3);
  }
  SUBCASE("non-deterministic functions are rejected") {
    int calls = 0;
    CHECK_THROWS_AS(grad_check(
                        [&](const std::vector<Tensor>& in) {
                          return ops::scale(ops::sum(in[0]), 1.0 + (++calls));
                        },
                        {rand_tensor({2}, rng)}),
                    ValidationError);
  }
}

TEST_CASE("forward results are bit-identical across runs") {
  Rng rng(30);
  Tensor x = rand_tensor({6, 6, 3}, rng);
  Tensor w = rand_tensor({3, 3, 3, 4}, rng);
  Tensor b = rand_tensor({4}, rng);
  auto run = [&] {
    return ops::bilinear_upsample(ops::relu(ops::conv2d(x, w, b, 2)), 9, 9);
  };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("rng determinism and derivation") {
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng::derive(5, 1), d = Rng::derive(5, 2);
  CHECK(c.next_u64() != d.next_u64());
  Rng e(9);
  e.uniform();
  const std::string state = e.state();
  const double next = e.uniform();
  Rng f;
  f.set_state(state);
  CHECK(f.uniform() == next);
}
