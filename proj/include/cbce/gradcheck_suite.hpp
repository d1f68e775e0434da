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

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cbce/gradcheck.hpp"

namespace cbce {

/// A named gradient check over a randomized float64 micro problem.
struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

// Every differentiable op and module, plus the composed micro-graph.
const std::vector<GradCase>& gradient_cases();

struct GradCaseSummary {
  std::string name;
  std::size_t seeds = 0;
  std::size_t passed = 0;
  double worst_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
};

// Runs the named case (or all when empty) over seeds [first, first + count).
// Throws ValidationError for an unknown name.
std::vector<GradCaseSummary> run_gradient_suite(const std::string& only, std::uint64_t first_seed,
                                                std::size_t count);

}  // namespace cbce
