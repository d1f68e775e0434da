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

#include "cbce/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cbce/graph.hpp"

namespace cbce {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tensor out = f(inputs);
  if (out.numel() != 1) {
    throw ValidationError("grad_check: function must return a scalar, got " +
                          shape_string(out.shape()));
  }
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double h, double tol) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const double base = evaluate(f, inputs);
  if (evaluate(f, inputs) != base) {
    throw ValidationError("grad_check: function is not deterministic");
  }

  Graph graph;
  {
    GraphScope scope(graph);
    Tensor loss = f(inputs);
    graph.backward(loss);
  }

  GradCheckReport report;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    Tensor& t = inputs[n];
    const std::vector<double> analytic = t.has_grad()
                                             ? std::vector<double>(t.grad().begin(), t.grad().end())
                                             : std::vector<double>(t.numel(), 0.0);
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = evaluate(f, inputs);
      data[i] = saved - h;
      const double down = evaluate(f, inputs);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), kGradCheckFloor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = n;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace cbce
