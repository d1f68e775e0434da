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

#include "cbce/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "cbce/cim.hpp"
#include "cbce/encoders.hpp"
#include "cbce/fusion.hpp"
#include "cbce/ops.hpp"
#include "cbce/seghead.hpp"

namespace cbce {
namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_uniform(std::move(shape), lo, hi, rng);
}

// Values with |v| in [0.1, 1], away from the ReLU and max kinks.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// sum(out * R) with a fixed random R, so every output entry gets its own weight.
Tensor weighted(const Tensor& out, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xfeed);
  return ops::sum(ops::mul(out, uniform(out.shape(), rng)));
}

std::vector<Tensor> store_tensors(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : store.entries()) out.push_back(t);
  return out;
}

GradCheckReport check(const ScalarFn& f, std::vector<Tensor> inputs) {
  return grad_check(f, std::move(inputs), kStep, kTol);
}

using Case = std::function<GradCheckReport(std::uint64_t)>;

struct Problem {
  ScalarFn f;
  std::vector<Tensor> inputs;
};

double numeric_derivative(const ScalarFn& f, const std::vector<Tensor>& inputs, Tensor t,
                          std::size_t i, double h) {
  auto data = t.mutable_data();
  const double saved = data[i];
  data[i] = saved + h;
  const double up = f(inputs).item();
  data[i] = saved - h;
  const double down = f(inputs).item();
  data[i] = saved;
  return (up - down) / (2.0 * h);
}

// False when some stencil [x - h, x + h] straddles a ReLU or max kink, seen as
// the central difference moving under a 100x finer step.
bool stencil_is_smooth(const Problem& p) {
  for (const Tensor& t : p.inputs) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double coarse = numeric_derivative(p.f, p.inputs, t, i, kStep);
      const double fine = numeric_derivative(p.f, p.inputs, t, i, kStep * 1e-2);
      const double denom = std::max({std::abs(coarse), std::abs(fine), kGradCheckFloor});
      if (std::abs(coarse - fine) / denom > 0.5 * kTol) return false;
    }
  }
  return true;
}

// Zero biases put every unit behind a fully dead layer exactly on a ReLU kink.
void jitter_biases(ParamStore& store, Rng& rng) {
  for (auto [name, t] : store.entries()) {
    if (name.ends_with("b")) {
      for (double& v : t.mutable_data()) v = rng.uniform(0.05, 0.3);
    }
  }
}

// For piecewise-linear graphs: redraws the instance until no stencil meets a kink.
Case piecewise_case(std::function<Problem(Rng&, std::uint64_t)> build) {
  return [build](std::uint64_t seed) {
    constexpr std::uint64_t kMaxDraws = 16;
    for (std::uint64_t draw = 0;; ++draw) {
      Rng rng = draw == 0 ? Rng(seed) : Rng::derive(seed, draw);
      Problem p = build(rng, seed);
      if (draw + 1 < kMaxDraws && !stencil_is_smooth(p)) continue;
      return check(p.f, p.inputs);
    }
  };
}

// Unary op on an input shaped [2,3,4].
Case unary(Tensor (*op)(const Tensor&), bool avoid_zero = false) {
  return [op, avoid_zero](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = avoid_zero ? away_from_zero({2, 3, 4}, rng) : uniform({2, 3, 4}, rng, -2.0, 2.0);
    return check([=](const std::vector<Tensor>& in) { return weighted(op(in[0]), seed); }, {x});
  };
}

Case binary(Tensor (*op)(const Tensor&, const Tensor&)) {
  return [op](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = uniform({3, 4}, rng), b = uniform({3, 4}, rng);
    return check([=](const std::vector<Tensor>& in) { return weighted(op(in[0], in[1]), seed); }, {a, b});
  };
}

// Fused micro features [2,2,3] for the three levels.
std::array<Tensor, 3> micro_fused(Rng& rng) {
  return {uniform({2, 2, 3}, rng), uniform({2, 2, 3}, rng), uniform({2, 2, 3}, rng)};
}

std::vector<GradCase> build_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t m = 1 + rng.uniform_int(3), k = 1 + rng.uniform_int(4),
                                       n = 1 + rng.uniform_int(3);
                     Tensor a = uniform({m, k}, rng), b = uniform({k, n}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::matmul(in[0], in[1]), seed); },
                                  {a, b});
                   }});
  cases.push_back({"add", binary(&ops::add)});
  cases.push_back({"sub", binary(&ops::sub)});
  cases.push_back({"mul", binary(&ops::mul)});
  cases.push_back({"scale", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({3, 2}, rng);
                     const double factor = rng.uniform(-2.0, 2.0);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::scale(in[0], factor), seed); }, {x});
                   }});
  cases.push_back({"add_bias", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({2, 3, 4}, rng), b = uniform({4}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::add_bias(in[0], in[1]), seed); },
                                  {x, b});
                   }});
  cases.push_back({"mul_channel", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({2, 3, 4}, rng), g = uniform({4}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::mul_channel(in[0], in[1]), seed); },
                                  {x, g});
                   }});
  cases.push_back({"relu", unary(&ops::relu, true)});
  cases.push_back({"sigmoid", unary(&ops::sigmoid)});
  cases.push_back({"tanh", unary(&ops::tanh)});
  cases.push_back({"reshape", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({2, 6}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::reshape(in[0], {3, 2, 2}), seed); }, {x});
                   }});
  cases.push_back({"concat", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor a = uniform({2, 2, 3}, rng), b = uniform({2, 2, 1}, rng);
                     const std::size_t axis = rng.uniform_int(3);
                     if (axis != 2) b = uniform({axis == 0 ? 1u : 2u, axis == 1 ? 1u : 2u, 3}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::concat({in[0], in[1]}, axis), seed); },
                                  {a, b});
                   }});
  cases.push_back({"slice", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({4, 3, 5}, rng);
                     const std::size_t axis = rng.uniform_int(3);
                     const std::size_t dim = x.dim(axis);
                     const std::size_t begin = rng.uniform_int(dim);
                     const std::size_t end = begin + 1 + rng.uniform_int(dim - begin);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::slice(in[0], axis, begin, end), seed); },
                                  {x});
                   }});
  cases.push_back({"softmax", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({1 + rng.uniform_int(7)}, rng, -3.0, 3.0);
                     const double s = rng.uniform(0.5, 3.0);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::softmax(in[0], s), seed); }, {x});
                   }});
  cases.push_back({"softmax_matmul", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor a = uniform({5, 3}, rng), b = uniform({3, 1}, rng);
                     return check([=](const std::vector<Tensor>& in) {
                                    return weighted(ops::softmax(ops::reshape(ops::matmul(in[0], in[1]), {5}), std::sqrt(3.0)), seed);
                                  },
                                  {a, b});
                   }});
  cases.push_back({"l2_normalize", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({5}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::l2_normalize(in[0]), seed); }, {x});
                   }});
  cases.push_back({"global_avg_pool", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({3, 2, 4}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::global_avg_pool(in[0]), seed); }, {x});
                   }});
  cases.push_back({"elementwise_max", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor a = uniform({2, 5}, rng);
                     // Gaps of at least 0.1 between candidates keep the argmax stable under h.
                     Tensor b = ops::add(a, away_from_zero({2, 5}, rng));
                     Tensor c = ops::add(b, away_from_zero({2, 5}, rng));
                     Tensor c_minus_a = ops::sub(c, a);
                     for (std::size_t i = 0; i < c.numel(); ++i) {
                       if (std::abs(c_minus_a[i]) < 0.1) c.mutable_data()[i] += 0.25;
                     }
                     return check([=](const std::vector<Tensor>& in) {
                                    return weighted(ops::elementwise_max({in[0], in[1], in[2]}), seed);
                                  },
                                  {a, b, c});
                   }});
  cases.push_back({"bilinear_upsample", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({1 + rng.uniform_int(3), 1 + rng.uniform_int(3), 2}, rng);
                     const std::size_t oh = 1 + rng.uniform_int(6), ow = 1 + rng.uniform_int(6);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::bilinear_upsample(in[0], oh, ow), seed); },
                                  {x});
                   }});
  cases.push_back({"conv2d", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
                     const int dilation = 1 + static_cast<int>(rng.uniform_int(3));
                     const int stride = 1 + static_cast<int>(rng.uniform_int(2));
                     Tensor x = uniform({4, 3, 2}, rng), w = uniform({k, k, 2, 3}, rng), b = uniform({3}, rng);
                     return check([=](const std::vector<Tensor>& in) {
                                    return weighted(ops::conv2d(in[0], in[1], in[2], dilation, stride), seed);
                                  },
                                  {x, w, b});
                   }});
  cases.push_back({"depthwise_conv2d", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const int dilation = 1 + static_cast<int>(rng.uniform_int(3));
                     Tensor x = uniform({4, 4, 2}, rng), w = uniform({3, 3, 2}, rng);
                     return check([=](const std::vector<Tensor>& in) {
                                    return weighted(ops::depthwise_conv2d(in[0], in[1], dilation), seed);
                                  },
                                  {x, w});
                   }});
  cases.push_back({"depthwise_separable_conv", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const int dilation = kAsppDilations[rng.uniform_int(4)];
                     Tensor x = uniform({3, 3, 2}, rng), dw = uniform({3, 3, 2}, rng), pw = uniform({1, 1, 2, 3}, rng),
                            pb = uniform({3}, rng);
                     return check([=](const std::vector<Tensor>& in) {
                                    return weighted(ops::depthwise_separable_conv(in[0], in[1], in[2], in[3], dilation), seed);
                                  },
                                  {x, dw, pw, pb});
                   }});
  cases.push_back({"linear", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({2, 2, 3}, rng), w = uniform({3, 4}, rng), b = uniform({4}, rng);
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::linear(in[0], in[1], in[2]), seed); },
                                  {x, w, b});
                   }});
  cases.push_back({"embedding", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor table = uniform({6, 3}, rng);
                     std::vector<int> ids;
                     for (int i = 0; i < 4; ++i) ids.push_back(static_cast<int>(rng.uniform_int(6)));
                     return check([=](const std::vector<Tensor>& in) { return weighted(ops::embedding(in[0], ids), seed); },
                                  {table});
                   }});
  cases.push_back({"sum", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor x = uniform({3, 4}, rng);
                     return check([](const std::vector<Tensor>& in) { return ops::sum(ops::mul(in[0], in[0])); }, {x});
                   }});
  cases.push_back({"bce_with_logits", [](std::uint64_t seed) {
                     Rng rng(seed);
                     Tensor z = uniform({3, 3}, rng, -4.0, 4.0);
                     Tensor g = Tensor::zeros({3, 3});
                     for (double& v : g.mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
                     return check([=](const std::vector<Tensor>& in) { return ops::bce_with_logits(in[0], g); }, {z});
                   }});

  cases.push_back({"visual_encode", piecewise_case([](Rng& rng, std::uint64_t seed) {
                     ParamStore store;
                     VisualEncoder encoder(store, "visual", {2, 3, 3, 3, 3}, 2, rng);
                     jitter_biases(store, rng);
                     Tensor image = uniform({32, 32, 3}, rng, 0.0, 1.0);
                     ScalarFn f = [=](const std::vector<Tensor>&) {
                       const FeaturePyramid p = encoder.encode(image);
                       return ops::add(ops::add(weighted(p.levels[0], seed), weighted(p.levels[1], seed + 1)),
                                       weighted(p.levels[2], seed + 2));
                     };
                     return Problem{f, store_tensors(store)};
                   })});
  cases.push_back({"phrase_encode", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     PhraseEncoder encoder(store, "phrase", 7, 3, 3, rng);
                     // Larger embeddings than the default init exercise the nonlinearities.
                     for (double& v : store.get("phrase.embed").mutable_data()) v = rng.uniform(-1.0, 1.0);
                     std::vector<std::vector<int>> lists;
                     for (int p = 0; p < 3; ++p) {
                       std::vector<int> tokens(1 + rng.uniform_int(3));
                       for (int& t : tokens) t = static_cast<int>(2 + rng.uniform_int(5));
                       lists.push_back(tokens);
                     }
                     const PhraseSet set = PhraseSet::from_tokens(lists, 7);
                     return check([=](const std::vector<Tensor>&) { return weighted(encoder.encode(set), seed); },
                                  store_tensors(store));
                   }});
  cases.push_back({"bilinear_fuse", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     const auto params = BilinearFusionParams::create(store, "fuse", 3, 2, 2, 3, rng);
                     Tensor v = uniform({2, 2, 3}, rng), l = uniform({2}, rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(v);
                     inputs.push_back(l);
                     return check([=](const std::vector<Tensor>&) { return weighted(bilinear_fuse(v, l, params), seed); },
                                  inputs);
                   }});
  cases.push_back({"vlm", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     const auto params = VlmParams::create(store, "vlm", 3, 3, 3, rng);
                     Tensor l = uniform({3}, rng), f = uniform({2, 2, 3}, rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(l);
                     inputs.push_back(f);
                     return check([=](const std::vector<Tensor>&) { return weighted(vlm(l, f, params), seed); }, inputs);
                   }});
  cases.push_back({"lvm", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     const std::size_t target = rng.uniform_int(3);
                     const auto params = LvmParams::create(store, "lvm", target, 3, 3, rng);
                     Tensor l = uniform({3}, rng);
                     const auto fused = micro_fused(rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(l);
                     inputs.insert(inputs.end(), fused.begin(), fused.end());
                     const auto src = other_levels(target);
                     return check([=](const std::vector<Tensor>&) {
                                    return weighted(lvm(l, fused, target, src[0], src[1], params), seed);
                                  },
                                  inputs);
                   }});
  cases.push_back({"cim_forward", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     const auto params = CimParams::create(store, "cim", 2, 1, 3, 3, 3, rng);
                     Tensor l0 = uniform({3}, rng);
                     const auto fused = micro_fused(rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(l0);
                     inputs.insert(inputs.end(), fused.begin(), fused.end());
                     return check([=](const std::vector<Tensor>&) {
                                    const CimState s = cim_forward(l0, fused, params, 2, 1);
                                    Tensor total = weighted(s.fused[0], seed);
                                    for (std::size_t l = 0; l < 3; ++l) {
                                      if (l > 0) total = ops::add(total, weighted(s.fused[l], seed + l));
                                      total = ops::add(total, weighted(s.lang[l], seed + 10 + l));
                                    }
                                    return total;
                                  },
                                  inputs);
                   }});
  cases.push_back({"aspp", piecewise_case([](Rng& rng, std::uint64_t seed) {
                     ParamStore store;
                     const auto params = AsppParams::create(store, "aspp", 3, 2, rng);
                     jitter_biases(store, rng);
                     Tensor x = uniform({3, 3, 3}, rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(x);
                     ScalarFn f = [=](const std::vector<Tensor>&) { return weighted(aspp(x, params), seed); };
                     return Problem{f, inputs};
                   })});
  cases.push_back({"predict_mask", [](std::uint64_t seed) {
                     Rng rng(seed);
                     ParamStore store;
                     const auto params = HeadParams::create(store, "head", 3, rng);
                     Tensor x = uniform({2, 2, 3}, rng);
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(x);
                     return check([=](const std::vector<Tensor>&) {
                                    const MaskPrediction p = predict_mask(x, 5, 3, params);
                                    return ops::add(weighted(p.logits, seed), weighted(p.probs, seed + 1));
                                  },
                                  inputs);
                   }});
  cases.push_back({"vlm_lvm_aspp_bce", piecewise_case([](Rng& rng, std::uint64_t) {
                     ParamStore store;
                     std::array<VlmParams, 3> vlms;
                     std::array<LvmParams, 3> lvms;
                     for (std::size_t l = 0; l < 3; ++l) {
                       vlms[l] = VlmParams::create(store, "vlm" + std::to_string(l), 3, 3, 3, rng);
                       lvms[l] = LvmParams::create(store, "lvm" + std::to_string(l), l, 3, 3, rng);
                     }
                     const auto aspp_params = AsppParams::create(store, "aspp", 9, 2, rng);
                     const auto head = HeadParams::create(store, "head", 2, rng);
                     jitter_biases(store, rng);
                     Tensor l0 = uniform({3}, rng);
                     const auto fused = micro_fused(rng);
                     Tensor gt = Tensor::zeros({3, 3});
                     for (double& v : gt.mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
                     std::vector<Tensor> inputs = store_tensors(store);
                     inputs.push_back(l0);
                     inputs.insert(inputs.end(), fused.begin(), fused.end());
                     ScalarFn f = [=](const std::vector<Tensor>&) {
                       std::array<Tensor, 3> next;
                       for (std::size_t l = 0; l < 3; ++l) {
                         const auto src = other_levels(l);
                         next[l] = lvm(vlm(l0, fused[l], vlms[l]), fused, l, src[0], src[1], lvms[l]);
                       }
                       const MaskPrediction p = predict_mask(aspp(concat_levels(next), aspp_params), 3, 3, head);
                       return bce_loss(p, gt);
                     };
                     return Problem{f, inputs};
                   })});
  return cases;
}

}  // namespace

const std::vector<GradCase>& gradient_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

std::vector<GradCaseSummary> run_gradient_suite(const std::string& only, std::uint64_t first_seed,
                                                std::size_t count) {
  std::vector<GradCaseSummary> out;
  for (const GradCase& c : gradient_cases()) {
    if (!only.empty() && c.name != only) continue;
    GradCaseSummary summary{c.name};
    for (std::uint64_t seed = first_seed; seed < first_seed + count; ++seed) {
      const GradCheckReport r = c.run(seed);
      ++summary.seeds;
      if (r.passed) ++summary.passed;
      if (r.max_rel_error >= summary.worst_rel_error) {
        summary.worst_rel_error = r.max_rel_error;
        summary.worst_seed = seed;
      }
    }
    out.push_back(summary);
  }
  if (out.empty()) throw ValidationError("gradcheck: unknown op '" + only + "'");
  return out;
}

}  // namespace cbce
