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

#include "cbce/graph.hpp"

#include <cmath>

namespace cbce {
namespace {

thread_local Graph* g_active = nullptr;

}  // namespace

void Graph::record(Node node) {
  if (consumed_) throw GraphError("cannot record '" + node.op + "' into a consumed graph");
  nodes_.push_back(std::move(node));
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw GraphError("backward called twice on the same graph");
  if (loss.numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  consumed_ = true;
  Tensor root = loss;
  root.ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from the loss
    it->backward(it->output.grad());
  }
  nodes_.clear();
  nodes_.shrink_to_fit();
}

GraphScope::GraphScope(Graph& graph) : previous_(g_active) { g_active = &graph; }

GraphScope::~GraphScope() { g_active = previous_; }

Graph* active_graph() { return g_active; }

void backward(const Tensor& loss, Graph& graph) { graph.backward(loss); }

void finalize_output(std::string_view op, Tensor& output) {
  auto values = output.mutable_data();
  if (output.dtype() == Dtype::kFloat32) {
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

Tensor record_op(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                 Graph::BackwardFn backward) {
  finalize_output(op, output);
  Graph* graph = g_active;
  if (graph == nullptr) return output;
  bool needs_grad = false;
  for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  if (!needs_grad) return output;
  output.set_requires_grad(true);
  graph->record(Graph::Node{std::string(op), std::move(inputs), output, std::move(backward)});
  return output;
}

}  // namespace cbce
