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

#include <functional>
#include <string>
#include <vector>

#include "cbce/tensor.hpp"

namespace cbce {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;  // number of scalar entries probed
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool passed = false;
};

// Relative errors are |a - n| / max(|a|, |n|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Every input is marked as requiring a gradient; their data is
/// perturbed in place and restored. Throws ValidationError if f is not
/// deterministic.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-4,
                           double tol = 1e-4);

}  // namespace cbce
