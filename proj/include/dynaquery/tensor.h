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

#ifndef DYNAQUERY_TENSOR_H_
#define DYNAQUERY_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace dynaquery {

using Shape = std::vector<int>;

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Storage with a fixed 64-byte alignment. Vectorized reductions peel a
// prefix that depends on the address, so a fixed alignment keeps results
// bitwise reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace internal {

// One vertex of the reverse-mode graph. `backward` reads this node's grad
// and accumulates into the grads of `inputs`.
struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Buffer& EnsureGrad();
};

}  // namespace internal

// Disables graph recording while alive. Thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool GradEnabled();

 private:
  bool previous_;
};

// Dense row-major float64 array with an optional gradient buffer. Copies
// share storage; use Clone() for an independent value.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Scalar(double value);
  static Tensor FromVector(std::vector<double> values);
  static Tensor FromBuffer(Shape shape, Buffer data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<int> index) const;
  std::vector<double> ToVector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void ZeroGrad();

  // New leaf with copied data and no history.
  Tensor Detach() const;
  Tensor Clone() const;

  // Reverse-mode sweep from this scalar.
  void Backward() const;

  const std::shared_ptr<internal::Node>& node() const { return node_; }
  static Tensor FromNode(std::shared_ptr<internal::Node> node);

 private:
  Tensor(Shape shape, Buffer data, std::nullptr_t);

  std::shared_ptr<internal::Node> node_;
};

// Builds an op result. When grad mode is on and any input needs a gradient
// the node keeps its inputs and backward rule; otherwise both are dropped.
Tensor MakeResult(Shape shape, Buffer data, std::vector<Tensor> inputs,
                  std::function<void(internal::Node&)> backward);

}  // namespace dynaquery

#endif  // DYNAQUERY_TENSOR_H_
