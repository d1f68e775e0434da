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

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cbce {

// Error hierarchy. NumericError maps to exit code 2 in the CLI, everything
// else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Dtype { kFloat32, kFloat64 };

std::string_view dtype_name(Dtype dtype);
Dtype parse_dtype(std::string_view name);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::kFloat64;
  std::vector<double> data;
  // Empty until the first gradient accumulation reaches this tensor.
  std::vector<double> grad;
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor handle.
///
/// Copies of a Tensor share storage, the same way graph nodes and parameter
/// stores refer to one buffer. Use clone() for an independent copy. Values
/// are held in double precision; a float32 tensor has every stored value
/// rounded to the nearest float after each operation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, Dtype dtype = Dtype::kFloat64);

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::kFloat64);
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::kFloat64);
  static Tensor scalar(double value, Dtype dtype = Dtype::kFloat64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  Dtype dtype() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t index) const { return data()[index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> ensure_grad();
  void zero_grad();
  Tensor grad_tensor() const;

  // Deep copy without gradient or graph history.
  Tensor clone() const;
  // Same storage identity.
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  void check_defined() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

bool all_finite(std::span<const double> values);

// Exact elementwise equality of shape and values.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace cbce
