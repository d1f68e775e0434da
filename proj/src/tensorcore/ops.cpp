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

#include "cbce/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cbce::ops {
namespace {

Tensor make_output(Shape shape, Dtype dtype) { return Tensor::zeros(std::move(shape), dtype); }

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
  }
}

// Accumulate into t's gradient only if it participates in differentiation.
template <typename Fn>
void accumulate(Tensor t, Fn&& fn) {
  if (!t.requires_grad()) return;
  fn(t.ensure_grad());
}

template <typename Forward, typename Backward>
Tensor unary(std::string_view op, const Tensor& x, Forward fwd, Backward bwd) {
  Tensor out = make_output(x.shape(), x.dtype());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  return record_op(op, {x}, out, [x, out, bwd](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      auto xd = x.data();
      auto od = out.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * bwd(xd[i], od[i]);
    });
  });
}

void check_conv_args(std::string_view op, std::size_t k1, std::size_t k2, int dilation) {
  if (k1 != k2) throw ShapeError(std::string(op) + ": kernel must be square");
  if (k1 % 2 == 0) {
    throw ValidationError(std::string(op) + ": kernel size must be odd, got " + std::to_string(k1));
  }
  if (dilation < 1) {
    throw ValidationError(std::string(op) + ": dilation must be >= 1, got " +
                          std::to_string(dilation));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_output({m, n}, a.dtype());
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &od[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = &bd[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return record_op("matmul", {a, b}, out, [a, b, m, k, n](std::span<const double> g) {
    // dA = dC * B^T
    accumulate(a, [&](std::span<double> ga) {
      auto bd = b.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
          ga[i * k + p] += s;
        }
    });
    // dB = A^T * dC
    accumulate(b, [&](std::span<double> gb) {
      auto ad = a.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    });
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = make_output(a.shape(), a.dtype());
  auto od = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  return record_op("add", {a, b}, out, [a, b](std::span<const double> g) {
    accumulate(a, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
    accumulate(b, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
    });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = make_output(a.shape(), a.dtype());
  auto od = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  return record_op("sub", {a, b}, out, [a, b](std::span<const double> g) {
    accumulate(a, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
    accumulate(b, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = make_output(a.shape(), a.dtype());
  auto od = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  return record_op("mul", {a, b}, out, [a, b](std::span<const double> g) {
    accumulate(a, [&](std::span<double> ga) {
      auto bd = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bd[i];
    });
    accumulate(b, [&](std::span<double> gb) {
      auto ad = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ad[i];
    });
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  const std::size_t c = bias.dim(0);
  if (x.shape().back() != c) {
    throw ShapeError("add_bias: trailing axis of " + shape_string(x.shape()) +
                     " does not match bias " + shape_string(bias.shape()));
  }
  Tensor out = make_output(x.shape(), x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + bd[i % c];
  return record_op("add_bias", {x, bias}, out, [x, bias, c](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
    accumulate(bias, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    });
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& gate) {
  require_rank("mul_channel", gate, 1);
  const std::size_t c = gate.dim(0);
  if (x.shape().back() != c) {
    throw ShapeError("mul_channel: trailing axis of " + shape_string(x.shape()) +
                     " does not match gate " + shape_string(gate.shape()));
  }
  Tensor out = make_output(x.shape(), x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  auto gd = gate.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * gd[i % c];
  return record_op("mul_channel", {x, gate}, out, [x, gate, c](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      auto gd = gate.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * gd[i % c];
    });
    accumulate(gate, [&](std::span<double> gg) {
      auto xd = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * xd[i];
    });
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  Tensor out(std::move(shape), std::move(values), x.dtype());
  return record_op("reshape", {x}, out, [x](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: " + shape_string(s) + " does not match " + shape_string(first) +
                       " off axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  // outer x (axis extent * inner) blocks
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_block = out_shape[axis] * inner;

  Tensor out = make_output(out_shape, xs.front().dtype());
  auto od = out.mutable_data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& t : xs) {
    offsets.push_back(offset);
    const std::size_t block = t.dim(axis) * inner;
    auto td = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&td[o * block], block, &od[o * out_block + offset]);
    offset += block;
  }
  return record_op("concat", xs, out,
                   [xs, offsets, outer, inner, out_block, axis](std::span<const double> g) {
                     for (std::size_t n = 0; n < xs.size(); ++n) {
                       accumulate(xs[n], [&](std::span<double> gx) {
                         const std::size_t block = xs[n].dim(axis) * inner;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < block; ++i)
                             gx[o * block + i] += g[o * out_block + offsets[n] + i];
                       });
                     }
                   });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t in_block = s[axis] * inner;
  const std::size_t out_block = (end - begin) * inner;
  Tensor out = make_output(out_shape, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(&xd[o * in_block + begin * inner], out_block, &od[o * out_block]);
  return record_op("slice", {x}, out,
                   [x, outer, inner, in_block, out_block, begin](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < out_block; ++i)
                           gx[o * in_block + begin * inner + i] += g[o * out_block + i];
                     });
                   });
}

Tensor softmax(const Tensor& x, double scale) {
  require_rank("softmax", x, 1);
  if (!(scale > 0.0)) throw ValidationError("softmax: scale must be positive");
  auto xd = x.data();
  const double mx = *std::max_element(xd.begin(), xd.end());
  Tensor out = make_output(x.shape(), x.dtype());
  auto od = out.mutable_data();
  double z = 0.0;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    od[i] = std::exp((xd[i] - mx) / scale);
    z += od[i];
  }
  for (double& v : od) v /= z;
  return record_op("softmax", {x}, out, [x, out, scale](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      auto y = out.data();
      double dot = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (g[i] - dot) / scale;
    });
  });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  auto xd = x.data();
  double sq = 0.0;
  for (double v : xd) sq += v * v;
  const double norm = std::sqrt(sq + eps);
  Tensor out = make_output(x.shape(), x.dtype());
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] / norm;
  return record_op("l2_normalize", {x}, out, [x, norm](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      auto xd = x.data();
      double dot = 0.0;
      for (std::size_t i = 0; i < xd.size(); ++i) dot += xd[i] * g[i];
      const double n3 = norm * norm * norm;
      for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += g[i] / norm - xd[i] * dot / n3;
    });
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 3);
  const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
  Tensor out = make_output({1, 1, c}, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) od[ch] += xd[p * c + ch];
  for (double& v : od) v /= static_cast<double>(hw);
  return record_op("global_avg_pool", {x}, out, [x, hw, c](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[p * c + ch] += g[ch] * inv;
    });
  });
}

Tensor elementwise_max(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("elementwise_max: no inputs");
  for (const Tensor& t : xs) require_same_shape("elementwise_max", xs.front(), t);
  const std::size_t n = xs.front().numel();
  Tensor out = make_output(xs.front().shape(), xs.front().dtype());
  auto od = out.mutable_data();
  std::vector<std::size_t> argmax(n, 0);
  auto first = xs.front().data();
  std::copy(first.begin(), first.end(), od.begin());
  for (std::size_t k = 1; k < xs.size(); ++k) {
    auto td = xs[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      if (td[i] > od[i]) {
        od[i] = td[i];
        argmax[i] = k;
      }
    }
  }
  return record_op("elementwise_max", xs, out, [xs, argmax](std::span<const double> g) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      accumulate(xs[k], [&](std::span<double> gx) {
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (argmax[i] == k) gx[i] += g[i];
      });
    }
  });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("bilinear_upsample", x, 3);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_upsample: empty target size");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  Tensor out = make_output({out_h, out_w, c}, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const Tap& a = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Tap& b = tx[ox];
      const double w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
      const double* p00 = &xd[(a.lo * w + b.lo) * c];
      const double* p01 = &xd[(a.lo * w + b.hi) * c];
      const double* p10 = &xd[(a.hi * w + b.lo) * c];
      const double* p11 = &xd[(a.hi * w + b.hi) * c];
      double* o = &od[(oy * out_w + ox) * c];
      for (std::size_t ch = 0; ch < c; ++ch)
        o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  return record_op("bilinear_upsample", {x}, out,
                   [x, ty, tx, w, c, out_h, out_w](std::span<const double> g) {
                     accumulate(x, [&](std::span<double> gx) {
                       for (std::size_t oy = 0; oy < out_h; ++oy) {
                         const Tap& a = ty[oy];
                         for (std::size_t ox = 0; ox < out_w; ++ox) {
                           const Tap& b = tx[ox];
                           const double* go = &g[(oy * out_w + ox) * c];
                           const double w00 = (1 - a.frac) * (1 - b.frac);
                           const double w01 = (1 - a.frac) * b.frac;
                           const double w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             gx[(a.lo * w + b.lo) * c + ch] += w00 * go[ch];
                             gx[(a.lo * w + b.hi) * c + ch] += w01 * go[ch];
                             gx[(a.hi * w + b.lo) * c + ch] += w10 * go[ch];
                             gx[(a.hi * w + b.hi) * c + ch] += w11 * go[ch];
                           }
                         }
                       }
                     });
                   });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int dilation,
              int stride) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", weight, 4);
  check_conv_args("conv2d", weight.dim(0), weight.dim(1), dilation);
  if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t k = weight.dim(0), cout = weight.dim(3);
  if (weight.dim(2) != cin) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  }
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  const long pad = static_cast<long>(dilation) * static_cast<long>(k - 1) / 2;
  const long dil = dilation;

  Tensor out = make_output({oh, ow, cout}, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* o = &od[(oy * ow + ox) * cout];
      if (bias.defined()) {
        auto bd = bias.data();
        std::copy(bd.begin(), bd.end(), o);
      }
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * s) + static_cast<long>(ky) * dil - pad;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox * s) + static_cast<long>(kx) * dil - pad;
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* xp = &xd[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin];
          const double* wp = &wd[(ky * k + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = xp[ci];
            const double* wrow = wp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wrow[co];
          }
        }
      }
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return record_op(
      "conv2d", inputs, out,
      [x, weight, bias, h, w, cin, k, cout, oh, ow, s, pad, dil](std::span<const double> g) {
        auto xd = x.data();
        auto wd = weight.data();
        const bool need_x = x.requires_grad();
        const bool need_w = weight.requires_grad();
        std::span<double> gx, gw;
        if (need_x) gx = Tensor(x).ensure_grad();
        if (need_w) gw = Tensor(weight).ensure_grad();
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* go = &g[(oy * ow + ox) * cout];
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * s) + static_cast<long>(ky) * dil - pad;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * s) + static_cast<long>(kx) * dil - pad;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t xoff =
                    (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                const std::size_t woff = (ky * k + kx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double* wrow = &wd[woff + ci * cout];
                  if (need_x) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wrow[co];
                    gx[xoff + ci] += acc;
                  }
                  if (need_w) {
                    const double xv = xd[xoff + ci];
                    double* gwrow = &gw[woff + ci * cout];
                    for (std::size_t co = 0; co < cout; ++co) gwrow[co] += xv * go[co];
                  }
                }
              }
            }
          }
        }
        if (bias.defined()) {
          accumulate(bias, [&](std::span<double> gb) {
            for (std::size_t p = 0; p < oh * ow; ++p)
              for (std::size_t co = 0; co < cout; ++co) gb[co] += g[p * cout + co];
          });
        }
      });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, int dilation) {
  require_rank("depthwise_conv2d", x, 3);
  require_rank("depthwise_conv2d", weight, 3);
  check_conv_args("depthwise_conv2d", weight.dim(0), weight.dim(1), dilation);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), k = weight.dim(0);
  if (weight.dim(2) != c) {
    throw ShapeError("depthwise_conv2d: input " + shape_string(x.shape()) +
                     " incompatible with weight " + shape_string(weight.shape()));
  }
  const long pad = static_cast<long>(dilation) * static_cast<long>(k - 1) / 2;
  const long dil = dilation;
  Tensor out = make_output({h, w, c}, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t oy = 0; oy < h; ++oy)
    for (std::size_t ox = 0; ox < w; ++ox) {
      double* o = &od[(oy * w + ox) * c];
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy) + static_cast<long>(ky) * dil - pad;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox) + static_cast<long>(kx) * dil - pad;
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* xp = &xd[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c];
          const double* wp = &wd[(ky * k + kx) * c];
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += xp[ch] * wp[ch];
        }
      }
    }
  return record_op("depthwise_conv2d", {x, weight}, out,
                   [x, weight, h, w, c, k, pad, dil](std::span<const double> g) {
                     auto xd = x.data();
                     auto wd = weight.data();
                     const bool need_x = x.requires_grad();
                     const bool need_w = weight.requires_grad();
                     std::span<double> gx, gw;
                     if (need_x) gx = Tensor(x).ensure_grad();
                     if (need_w) gw = Tensor(weight).ensure_grad();
                     for (std::size_t oy = 0; oy < h; ++oy)
                       for (std::size_t ox = 0; ox < w; ++ox) {
                         const double* go = &g[(oy * w + ox) * c];
                         for (std::size_t ky = 0; ky < k; ++ky) {
                           const long iy = static_cast<long>(oy) + static_cast<long>(ky) * dil - pad;
                           if (iy < 0 || iy >= static_cast<long>(h)) continue;
                           for (std::size_t kx = 0; kx < k; ++kx) {
                             const long ix = static_cast<long>(ox) + static_cast<long>(kx) * dil - pad;
                             if (ix < 0 || ix >= static_cast<long>(w)) continue;
                             const std::size_t xoff = (static_cast<std::size_t>(iy) * w +
                                                       static_cast<std::size_t>(ix)) * c;
                             const std::size_t woff = (ky * k + kx) * c;
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               if (need_x) gx[xoff + ch] += go[ch] * wd[woff + ch];
                               if (need_w) gw[woff + ch] += go[ch] * xd[xoff + ch];
                             }
                           }
                         }
                       }
                   });
}

Tensor depthwise_separable_conv(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise,
                                const Tensor& pointwise_bias, int dilation) {
  require_rank("depthwise_separable_conv", pointwise, 4);
  if (pointwise.dim(0) != 1 || pointwise.dim(1) != 1) {
    throw ShapeError("depthwise_separable_conv: pointwise kernel must be 1x1, got " +
                     shape_string(pointwise.shape()));
  }
  return conv2d(depthwise_conv2d(x, depthwise, dilation), pointwise, pointwise_bias, 1);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", weight, 2);
  const std::size_t cin = weight.dim(0), cout = weight.dim(1);
  if (x.shape().back() != cin) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out = make_output(out_shape, x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = &od[r * cout];
    if (bias.defined()) {
      auto bd = bias.data();
      std::copy(bd.begin(), bd.end(), o);
    }
    for (std::size_t i = 0; i < cin; ++i) {
      const double xv = xd[r * cin + i];
      const double* wrow = &wd[i * cout];
      for (std::size_t j = 0; j < cout; ++j) o[j] += xv * wrow[j];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return record_op("linear", inputs, out, [x, weight, bias, rows, cin, cout](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      auto wd = weight.data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < cin; ++i) {
          double acc = 0.0;
          const double* wrow = &wd[i * cout];
          for (std::size_t j = 0; j < cout; ++j) acc += g[r * cout + j] * wrow[j];
          gx[r * cin + i] += acc;
        }
    });
    accumulate(weight, [&](std::span<double> gw) {
      auto xd = x.data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < cin; ++i) {
          const double xv = xd[r * cin + i];
          double* gwrow = &gw[i * cout];
          for (std::size_t j = 0; j < cout; ++j) gwrow[j] += xv * g[r * cout + j];
        }
    });
    if (bias.defined()) {
      accumulate(bias, [&](std::span<double> gb) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
      });
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  for (int id : rows) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ValidationError("embedding: token id " + std::to_string(id) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Tensor out = make_output({rows.size(), d}, table.dtype());
  auto od = out.mutable_data();
  auto td = table.data();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(&td[static_cast<std::size_t>(rows[r]) * d], d, &od[r * d]);
  return record_op("embedding", {table}, out, [table, rows, d](std::span<const double> g) {
    accumulate(table, [&](std::span<double> gt) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
          gt[static_cast<std::size_t>(rows[r]) * d + j] += g[r * d + j];
    });
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total, x.dtype());
  return record_op("sum", {x}, out, [x](std::span<const double> g) {
    accumulate(x, [&](std::span<double> gx) {
      for (double& v : gx) v += g[0];
    });
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target, double eps) {
  require_same_shape("bce_with_logits", logits, target);
  for (double t : target.data()) {
    if (t != 0.0 && t != 1.0) throw ValidationError("bce_with_logits: target must be binary");
  }
  // Clamping p to [eps, 1-eps] equals clamping the logit to +-log((1-eps)/eps).
  const double zmax = std::log((1.0 - eps) / eps);
  auto zd = logits.data();
  auto td = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < zd.size(); ++i) {
    const double z = std::clamp(zd[i], -zmax, zmax);
    // max(z,0) - z*g + log(1 + exp(-|z|))
    total += std::max(z, 0.0) - z * td[i] + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor out = Tensor::scalar(total, logits.dtype());
  return record_op("bce_with_logits", {logits}, out, [logits, target](std::span<const double> g) {
    accumulate(logits, [&](std::span<double> gz) {
      auto zd = logits.data();
      auto td = target.data();
      for (std::size_t i = 0; i < gz.size(); ++i) {
        const double z = zd[i];
        const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        gz[i] += g[0] * (p - td[i]);
      }
    });
  });
}

}  // namespace cbce::ops
