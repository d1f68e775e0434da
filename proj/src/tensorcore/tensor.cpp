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

#include "cbce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace cbce {

std::string_view dtype_name(Dtype dtype) {
  return dtype == Dtype::kFloat32 ? "float32" : "float64";
}

Dtype parse_dtype(std::string_view name) {
  if (name == "float32" || name == "f32") return Dtype::kFloat32;
  if (name == "float64" || name == "f64") return Dtype::kFloat64;
  throw ValidationError("unknown dtype '" + std::string(name) + "'");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, Dtype dtype) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  if (dtype == Dtype::kFloat32) {
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->data = std::move(values);
  impl_ = std::move(impl);
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), dtype);
}

Tensor Tensor::scalar(double value, Dtype dtype) { return Tensor({1}, {value}, dtype); }

void Tensor::check_defined() const {
  if (!impl_) throw Error("use of an undefined tensor");
}

const Shape& Tensor::shape() const {
  check_defined();
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const {
  check_defined();
  return impl_->data.size();
}

Dtype Tensor::dtype() const {
  check_defined();
  return impl_->dtype;
}

std::span<const double> Tensor::data() const {
  check_defined();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  check_defined();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const {
  check_defined();
  return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool value) {
  check_defined();
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const {
  check_defined();
  return !impl_->grad.empty();
}

std::span<const double> Tensor::grad() const {
  check_defined();
  return impl_->grad;
}

std::span<double> Tensor::ensure_grad() {
  check_defined();
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  check_defined();
  impl_->grad.clear();
}

Tensor Tensor::grad_tensor() const {
  check_defined();
  if (impl_->grad.empty()) return Tensor::zeros(impl_->shape, impl_->dtype);
  return Tensor(impl_->shape, impl_->grad, impl_->dtype);
}

Tensor Tensor::clone() const {
  check_defined();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0;
}

}  // namespace cbce
