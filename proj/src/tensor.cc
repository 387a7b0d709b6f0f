// Copyright 2026 The Dynaquery Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dynaquery/tensor.h"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

thread_local bool grad_enabled = true;

}  // namespace

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace internal {

Buffer& Node::EnsureGrad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace internal

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }
bool NoGradGuard::GradEnabled() { return grad_enabled; }

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill)
    : Tensor(shape, Buffer(std::max<int64_t>(NumElements(shape), 0), fill),
             nullptr) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end()), nullptr) {}

Tensor::Tensor(Shape shape, Buffer data, std::nullptr_t)
    : node_(std::make_shared<internal::Node>()) {
  for (int d : shape) {
    if (d <= 0)
      Fail(ErrorKind::kDimension, "non-positive extent in shape ",
           ShapeToString(shape));
  }
  if (NumElements(shape) != static_cast<int64_t>(data.size())) {
    Fail(ErrorKind::kDimension, "shape ", ShapeToString(shape), " needs ",
         NumElements(shape), " values, got ", data.size());
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::FromBuffer(Shape shape, Buffer data) {
  return Tensor(std::move(shape), std::move(data), nullptr);
}

Tensor Tensor::Scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::FromVector(std::vector<double> values) {
  const int n = static_cast<int>(values.size());
  return Tensor({n}, std::move(values));
}

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    Fail(ErrorKind::kIndex, "axis ", axis, " out of range for rank ", r);
  }
  return node_->shape[axis];
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(node_->data.size());
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    Fail(ErrorKind::kDimension, "item() on tensor of shape ",
         ShapeToString(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    Fail(ErrorKind::kIndex, "index rank ", index.size(), " vs tensor rank ",
         rank());
  }
  int64_t flat = 0;
  int axis = 0;
  for (int i : index) {
    if (i < 0 || i >= node_->shape[axis]) {
      Fail(ErrorKind::kIndex, "index ", i, " out of range on axis ", axis);
    }
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

std::vector<double> Tensor::ToVector() const {
  return {node_->data.begin(), node_->data.end()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->data.size();
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) Fail(ErrorKind::kInput, "tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->EnsureGrad(); }

void Tensor::ZeroGrad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::Detach() const { return FromBuffer(shape(), node_->data); }

Tensor Tensor::Clone() const {
  Tensor out = FromBuffer(shape(), node_->data);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

Tensor Tensor::FromNode(std::shared_ptr<internal::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

void Tensor::Backward() const {
  if (numel() != 1) {
    Fail(ErrorKind::kDimension, "Backward() needs a scalar, got ",
         ShapeToString(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<internal::Node*> order;
  std::unordered_set<internal::Node*> visited;
  std::vector<std::pair<internal::Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      internal::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  node_->EnsureGrad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    internal::Node* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) {
      node->backward(*node);
    }
  }
}

Tensor MakeResult(Shape shape, Buffer data, std::vector<Tensor> inputs,
                  std::function<void(internal::Node&)> backward) {
  Tensor out = Tensor::FromBuffer(std::move(shape), std::move(data));
  if (!NoGradGuard::GradEnabled()) return out;
  const bool needs =
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.node());
  node.backward = std::move(backward);
  return out;
}

}  // namespace dynaquery
