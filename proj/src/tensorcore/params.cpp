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

#include "cbce/params.hpp"

#include <algorithm>
#include <cmath>

namespace cbce {

Tensor ParamStore::insert(const std::string& name, Tensor value) {
  if (contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  entries_.emplace_back(name, value);
  return value;
}

Tensor ParamStore::add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
  return insert(name, random_uniform(std::move(shape), -bound, bound, rng, dtype_));
}

Tensor ParamStore::add_glorot(const std::string& name, Shape shape, std::size_t fan_in,
                              std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return add_uniform(name, std::move(shape), bound, rng);
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value) {
  return insert(name, Tensor::full(std::move(shape), value, dtype_));
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [key, value] : entries_)
    if (key == name) return value;
  throw ValidationError("no parameter named '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

}  // namespace cbce
