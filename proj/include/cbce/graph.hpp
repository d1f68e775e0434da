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
#include <span>
#include <string>
#include <vector>

#include "cbce/tensor.hpp"

namespace cbce {

/// Append-only tape of recorded operations.
///
/// Operations record themselves into the graph made active on the current
/// thread by a GraphScope, but only when at least one input requires a
/// gradient. Without an active graph every op is a plain forward
/// evaluation, which is how inference and finite-difference probes run.
class Graph {
 public:
  // Receives the output gradient and accumulates into input gradients.
  using BackwardFn = std::function<void(std::span<const double> output_grad)>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Reverse sweep from a scalar loss. The graph is consumed afterwards and
  // its saved values are released.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Makes a graph the active recording target for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

void backward(const Tensor& loss, Graph& graph);

/// Hook for op implementations (and test fixtures defining custom ops):
/// marks `output` as graph-produced and records it when an active graph
/// exists and any input requires a gradient. Also applies dtype rounding and
/// the non-finite check to the output.
Tensor record_op(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                 Graph::BackwardFn backward);

// Rounds to float when the tensor is float32 and throws NumericError naming
// `op` if any value is non-finite.
void finalize_output(std::string_view op, Tensor& output);

}  // namespace cbce
