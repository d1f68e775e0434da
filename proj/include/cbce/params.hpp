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

#include <string>
#include <utility>
#include <vector>

#include "cbce/rng.hpp"
#include "cbce/tensor.hpp"

namespace cbce {

/// Ordered collection of named trainable tensors. Insertion order is the
/// serialization order.
class ParamStore {
 public:
  explicit ParamStore(Dtype dtype = Dtype::kFloat64) : dtype_(dtype) {}

  // Uniform(-bound, bound) initialization.
  Tensor add_uniform(const std::string& name, Shape shape, double bound, Rng& rng);
  // Glorot-uniform with the given fan sizes.
  Tensor add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                    Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t total_size() const;
  Dtype dtype() const { return dtype_; }
  void zero_grad();

 private:
  Tensor insert(const std::string& name, Tensor value);

  Dtype dtype_;
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace cbce
