// Copyright 2026 The ibkt Authors.
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
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ibkt/rng.hpp"

namespace ibkt::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor with reverse-mode autodiff. Copies share the
// underlying node.
template <class T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> data,
                          bool requires_grad = false);
  static BasicTensor scalar(T value) { return from({}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  // Empty when no gradient has reached this tensor.
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the data.
  BasicTensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Records operations executed on this thread while alive. Without an active
// tape, ops build no graph (inference mode).
template <class T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)=1 and runs every recorded node's backward once, in
  // reverse execution order. Leaves keep their gradients; the graph is
  // released afterwards.
  void backward(const BasicTensor<T>& loss);

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  Tape* previous_ = nullptr;
};

// a[..., K] x b[K, N] -> [..., N]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// a[..., K] x b[N, K]^T -> [..., N]
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
// Batched: a[B, M, K] x b[B, K, N] (or b[B, N, K] when transpose_b).
template <class T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b,
                   bool transpose_b = false);

// Elementwise with numpy-style broadcasting.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s);

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis = -1);
template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a, int axis = -1);

// Normalizes over the last axis; gain and bias have shape [D].
template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, T eps = T(1e-5));

// tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3))).
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

// Rows of table[V, D] -> [ids.size(), D].
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const std::int32_t> ids);

// Inverted dropout; identity when !train or rate == 0.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng,
                       bool train);

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start,
                     std::size_t length);
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// Mean over non-pad rows of -sum_v q_v log softmax(logits)_v with
// q = (1 - eps) onehot(label) + eps / V.
template <class T>
BasicTensor<T> cross_entropy_label_smoothed(const BasicTensor<T>& logits,
                                            std::span<const std::int32_t> labels,
                                            double eps, std::int32_t pad_id);

struct GradCheckOptions {
  double h = 1e-3;
  // Elements checked per input; larger inputs are subsampled.
  std::size_t max_elements = 256;
  std::uint64_t seed = 0;
};

// Max relative error |a - n| / max(1e-3, |a|, |n|) between reverse-mode
// and central-difference gradients of the scalar f(inputs).
double grad_check(
    const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
    std::vector<Tensor64> inputs, const GradCheckOptions& opts = {});

}  // namespace ibkt::tensor
