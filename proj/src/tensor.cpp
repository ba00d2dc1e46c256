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

#include "ibkt/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ibkt/error.hpp"

namespace ibkt::tensor {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<Mat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const Mat<T>>;

template <class T>
thread_local Tape<T>* g_active_tape = nullptr;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
BasicTensor<T> make(Shape shape, std::vector<T> data) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return BasicTensor<T>(std::move(node));
}

template <class T>
bool tracking(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T>
void attach(BasicTensor<T>& out, std::vector<NodePtr<T>> parents,
            std::function<void(Node<T>&)> fn) {
  Node<T>* n = out.node();
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward = std::move(fn);
  Tape<T>::active()->record(out.node_ptr());
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a,
                              const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Maps output elements to operand offsets under broadcasting.
struct Broadcast {
  enum Kind { kSame, kSuffixB, kSuffixA, kGeneral };
  Kind kind = kSame;
  Shape out;
  std::size_t na = 0, nb = 0;
  std::vector<std::uint32_t> ia, ib;

  std::size_t a_index(std::size_t i) const {
    switch (kind) {
      case kSame: case kSuffixB: return i;
      case kSuffixA: return i % na;
      default: return ia[i];
    }
  }
  std::size_t b_index(std::size_t i) const {
    switch (kind) {
      case kSame: case kSuffixA: return i;
      case kSuffixB: return i % nb;
      default: return ib[i];
    }
  }
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Broadcast plan_broadcast(const std::string& op, const Shape& a,
                         const Shape& b) {
  Broadcast p;
  p.na = numel(a);
  p.nb = numel(b);
  if (a == b) {
    p.kind = Broadcast::kSame;
    p.out = a;
    return p;
  }
  if (is_suffix(b, a)) {
    p.kind = Broadcast::kSuffixB;
    p.out = a;
    return p;
  }
  if (is_suffix(a, b)) {
    p.kind = Broadcast::kSuffixA;
    p.out = b;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_error(op, a, b);
    p.out[i] = std::max(pa[i], pb[i]);
  }
  p.kind = Broadcast::kGeneral;
  std::vector<std::size_t> sa(r), sb(r);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : acc_a;
    sb[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = numel(p.out);
  p.ia.resize(n);
  p.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p.ia[i] = static_cast<std::uint32_t>(oa);
    p.ib[i] = static_cast<std::uint32_t>(ob);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < p.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor / Tape

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = tensor::numel(shape);
  auto t = make<T>(std::move(shape), std::vector<T>(n, value));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> data,
                                    bool requires_grad) {
  if (tensor::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(tensor::numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto t = make<T>(std::move(shape), std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
std::size_t BasicTensor<T>::dim(int axis) const {
  return shape()[norm_axis(axis, rank(), "dim")];
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                     " is not a scalar");
  }
  return node_->data[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(shape(), values());
}

template <class T>
Tape<T>::Tape() : previous_(g_active_tape<T>) {
  g_active_tape<T> = this;
}

template <class T>
Tape<T>::~Tape() {
  for (auto& n : nodes_) {
    n->parents.clear();
    n->backward = nullptr;
  }
  g_active_tape<T> = previous_;
}

template <class T>
Tape<T>* Tape<T>::active() {
  return g_active_tape<T>;
}

template <class T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss does not depend on any trainable tensor");
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
    n.backward = nullptr;
    n.parents.clear();
    std::vector<T>().swap(n.grad);
  }
  nodes_.clear();
}

// ---------------------------------------------------------------------------
// Matrix products

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() =
      ConstMapMat<T>(a.data(), m, k) * ConstMapMat<T>(b.data(), k, n);
  auto result = make<T>(std::move(out_shape), std::move(out));
  if (tracking<T>({&a, &b})) {
    attach<T>(result, {a.node_ptr(), b.node_ptr()}, [m, k, n](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      ConstMapMat<T> dc(self.grad.data(), m, n);
      if (pa.requires_grad) {
        MapMat<T>(pa.ensure_grad().data(), m, k).noalias() +=
            dc * ConstMapMat<T>(pb.data.data(), k, n).transpose();
      }
      if (pb.requires_grad) {
        MapMat<T>(pb.ensure_grad().data(), k, n).noalias() +=
            ConstMapMat<T>(pa.data.data(), m, k).transpose() * dc;
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(1)) {
    shape_error("matmul_nt", a.shape(), b.shape());
  }
  const std::size_t k = b.dim(1), n = b.dim(0), m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() =
      ConstMapMat<T>(a.data(), m, k) * ConstMapMat<T>(b.data(), n, k).transpose();
  auto result = make<T>(std::move(out_shape), std::move(out));
  if (tracking<T>({&a, &b})) {
    attach<T>(result, {a.node_ptr(), b.node_ptr()}, [m, k, n](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      ConstMapMat<T> dc(self.grad.data(), m, n);
      if (pa.requires_grad) {
        MapMat<T>(pa.ensure_grad().data(), m, k).noalias() +=
            dc * ConstMapMat<T>(pb.data.data(), n, k);
      }
      if (pb.requires_grad) {
        MapMat<T>(pb.ensure_grad().data(), n, k).noalias() +=
            dc.transpose() * ConstMapMat<T>(pa.data.data(), m, k);
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b,
                   bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    shape_error("bmm", a.shape(), b.shape());
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMapMat<T> am(a.data() + i * m * k, m, k);
    MapMat<T> cm(out.data() + i * m * n, m, n);
    if (transpose_b) {
      cm.noalias() = am * ConstMapMat<T>(b.data() + i * n * k, n, k).transpose();
    } else {
      cm.noalias() = am * ConstMapMat<T>(b.data() + i * k * n, k, n);
    }
  }
  auto result = make<T>({batch, m, n}, std::move(out));
  if (tracking<T>({&a, &b})) {
    attach<T>(result, {a.node_ptr(), b.node_ptr()},
              [batch, m, k, n, transpose_b](Node<T>& self) {
                Node<T>& pa = *self.parents[0];
                Node<T>& pb = *self.parents[1];
                T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
                T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
                for (std::size_t i = 0; i < batch; ++i) {
                  ConstMapMat<T> dc(self.grad.data() + i * m * n, m, n);
                  ConstMapMat<T> am(pa.data.data() + i * m * k, m, k);
                  if (transpose_b) {
                    ConstMapMat<T> bm(pb.data.data() + i * n * k, n, k);
                    if (ga) MapMat<T>(ga + i * m * k, m, k).noalias() += dc * bm;
                    if (gb) {
                      MapMat<T>(gb + i * n * k, n, k).noalias() +=
                          dc.transpose() * am;
                    }
                  } else {
                    ConstMapMat<T> bm(pb.data.data() + i * k * n, k, n);
                    if (ga) {
                      MapMat<T>(ga + i * m * k, m, k).noalias() +=
                          dc * bm.transpose();
                    }
                    if (gb) {
                      MapMat<T>(gb + i * k * n, k, n).noalias() +=
                          am.transpose() * dc;
                    }
                  }
                }
              });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = std::make_shared<Broadcast>(
      plan_broadcast("add", a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  std::vector<T> out(n);
  const T* x = a.data();
  const T* y = b.data();
  if (plan->kind == Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = x[plan->a_index(i)] + y[plan->b_index(i)];
    }
  }
  auto result = make<T>(plan->out, std::move(out));
  if (tracking<T>({&a, &b})) {
    attach<T>(result, {a.node_ptr(), b.node_ptr()}, [plan, n](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      const T* g = self.grad.data();
      if (pa.requires_grad) {
        T* ga = pa.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[plan->a_index(i)] += g[i];
      }
      if (pb.requires_grad) {
        T* gb = pb.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gb[plan->b_index(i)] += g[i];
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = std::make_shared<Broadcast>(
      plan_broadcast("mul", a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  std::vector<T> out(n);
  const T* x = a.data();
  const T* y = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = x[plan->a_index(i)] * y[plan->b_index(i)];
  }
  auto result = make<T>(plan->out, std::move(out));
  if (tracking<T>({&a, &b})) {
    attach<T>(result, {a.node_ptr(), b.node_ptr()}, [plan, n](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      const T* g = self.grad.data();
      if (pa.requires_grad) {
        T* ga = pa.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) {
          ga[plan->a_index(i)] += g[i] * pb.data[plan->b_index(i)];
        }
      }
      if (pb.requires_grad) {
        T* gb = pb.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) {
          gb[plan->b_index(i)] += g[i] * pa.data[plan->a_index(i)];
        }
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  auto result = make<T>(a.shape(), std::move(out));
  if (tracking<T>({&a})) {
    attach<T>(result, {a.node_ptr()}, [s](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis) {
  const AxisSplit sp = split_at(a.shape(), norm_axis(axis, a.rank(), "softmax"));
  std::vector<T> out(a.numel());
  const T* x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) {
        mx = std::max(mx, x[base + j * sp.inner]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        // Fully masked row.
        for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = 0;
        continue;
      }
      T total = 0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] *= inv;
    }
  }
  auto result = make<T>(a.shape(), std::move(out));
  if (tracking<T>({&a})) {
    attach<T>(result, {a.node_ptr()}, [sp](Node<T>& self) {
      auto& ga = self.parents[0]->ensure_grad();
      const T* y = self.data.data();
      const T* g = self.grad.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < sp.len; ++j) {
            const std::size_t p = base + j * sp.inner;
            dot += g[p] * y[p];
          }
          for (std::size_t j = 0; j < sp.len; ++j) {
            const std::size_t p = base + j * sp.inner;
            ga[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a, int axis) {
  const AxisSplit sp =
      split_at(a.shape(), norm_axis(axis, a.rank(), "log_softmax"));
  std::vector<T> out(a.numel());
  const T* x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) {
        mx = std::max(mx, x[base + j * sp.inner]);
      }
      T total = 0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        total += std::exp(x[base + j * sp.inner] - mx);
      }
      const T lse = mx + std::log(total);
      for (std::size_t j = 0; j < sp.len; ++j) {
        out[base + j * sp.inner] = x[base + j * sp.inner] - lse;
      }
    }
  }
  auto result = make<T>(a.shape(), std::move(out));
  if (tracking<T>({&a})) {
    attach<T>(result, {a.node_ptr()}, [sp](Node<T>& self) {
      auto& ga = self.parents[0]->ensure_grad();
      const T* y = self.data.data();
      const T* g = self.grad.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T gsum = 0;
          for (std::size_t j = 0; j < sp.len; ++j) gsum += g[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.len; ++j) {
            const std::size_t p = base + j * sp.inner;
            ga[p] += g[p] - std::exp(y[p]) * gsum;
          }
        }
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, T eps) {
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    shape_error("layernorm", x.shape(), gain.shape());
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const T* in = x.data();
  const T* g = gain.data();
  const T* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*rstd)[r] = static_cast<T>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>((row[j] - mu) * inv);
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  auto result = make<T>(x.shape(), std::move(out));
  if (tracking<T>({&x, &gain, &bias})) {
    attach<T>(result, {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
              [xhat, rstd, rows, d](Node<T>& self) {
                Node<T>& px = *self.parents[0];
                Node<T>& pg = *self.parents[1];
                Node<T>& pb = *self.parents[2];
                const T* dy = self.grad.data();
                const T* gv = pg.data.data();
                const T* h = xhat->data();
                if (pg.requires_grad) {
                  T* dg = pg.ensure_grad().data();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                      dg[j] += dy[r * d + j] * h[r * d + j];
                    }
                  }
                }
                if (pb.requires_grad) {
                  T* db = pb.ensure_grad().data();
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
                  }
                }
                if (px.requires_grad) {
                  T* dx = px.ensure_grad().data();
                  for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = dy[r * d + j] * gv[j];
                      m1 += dh;
                      m2 += dh * h[r * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = dy[r * d + j] * gv[j];
                      dx[r * d + j] += static_cast<T>(
                          (*rstd)[r] * (dh - m1 - h[r * d + j] * m2));
                    }
                  }
                }
              });
  }
  return result;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = in[i];
    const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
    out[i] = T(0.5) * v * (T(1) + t);
  }
  auto result = make<T>(x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [](Node<T>& self) {
      Node<T>& px = *self.parents[0];
      auto& gx = px.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = px.data[i];
        const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
        const T dt = (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v);
        gx[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const std::int32_t> ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be rank 2, got " +
                     shape_str(table.shape()));
  }
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) +
                       " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  auto result = make<T>({ids.size(), d}, std::move(out));
  if (tracking<T>({&table})) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    attach<T>(result, {table.node_ptr()},
              [saved = std::move(saved), d](Node<T>& self) {
                T* g = self.parents[0]->ensure_grad().data();
                for (std::size_t i = 0; i < saved.size(); ++i) {
                  T* row = g + static_cast<std::size_t>(saved[i]) * d;
                  const T* src = self.grad.data() + i * d;
                  for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
                }
              });
  }
  return result;
}

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng,
                       bool train) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error("dropout: rate must lie in [0, 1)");
  }
  if (!train || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < rate ? T(0) : keep_scale;
    out[i] = x.data()[i] * (*mask)[i];
  }
  auto result = make<T>(x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [mask](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += self.grad[i] * (*mask)[i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) {
      shape_error("concat", parts[0].shape(), s);
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) {
        shape_error("concat", parts[0].shape(), s);
      }
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[ax] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.data() + o * chunk, chunk,
                  out.data() + o * sp.len * sp.inner + off * sp.inner);
    }
    off += p.shape()[ax];
  }
  auto result = make<T>(std::move(out_shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape<T>::active()) {
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    attach<T>(result, std::move(parents), [sp, offsets, ax](Node<T>& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node<T>& p = *self.parents[k];
        if (!p.requires_grad) continue;
        const std::size_t chunk = p.shape[ax] * sp.inner;
        T* g = p.ensure_grad().data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src =
              self.grad.data() + o * sp.len * sp.inner + offsets[k] * sp.inner;
          for (std::size_t j = 0; j < chunk; ++j) g[o * chunk + j] += src[j];
        }
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start,
                     std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank(), "slice");
  if (start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis of " +
                     shape_str(x.shape()));
  }
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<T> out(numel(out_shape));
  const std::size_t chunk = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.data() + o * sp.len * sp.inner + start * sp.inner, chunk,
                out.data() + o * chunk);
  }
  auto result = make<T>(std::move(out_shape), std::move(out));
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [sp, start, chunk](Node<T>& self) {
      T* g = self.parents[0]->ensure_grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        T* dst = g + o * sp.len * sp.inner + start * sp.inner;
        const T* src = self.grad.data() + o * chunk;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    shape_error("reshape", x.shape(), shape);
  }
  auto result = make<T>(std::move(shape), x.values());
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) {
    throw ShapeError("permute: permutation of size " +
                     std::to_string(perm.size()) + " for shape " +
                     shape_str(x.shape()));
  }
  std::vector<bool> seen(r, false);
  std::vector<std::size_t> axes(r);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    axes[i] = norm_axis(perm[i], r, "permute");
    if (seen[axes[i]]) throw ShapeError("permute: repeated axis");
    seen[axes[i]] = true;
    out_shape[i] = x.shape()[axes[i]];
  }
  std::vector<std::size_t> in_strides(r);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = acc;
    acc *= x.shape()[i];
  }
  // Source offset for every output element.
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::uint32_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = static_cast<std::uint32_t>(off);
    for (std::size_t d = r; d-- > 0;) {
      const std::size_t stride = in_strides[axes[d]];
      ++idx[d];
      off += stride;
      if (idx[d] < out_shape[d]) break;
      off -= stride * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[(*src)[i]];
  auto result = make<T>(std::move(out_shape), std::move(out));
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [src](Node<T>& self) {
      T* g = self.parents[0]->ensure_grad().data();
      for (std::size_t i = 0; i < src->size(); ++i) g[(*src)[i]] += self.grad[i];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double total = 0.0;
  for (T v : x.values()) total += v;
  auto result = make<T>({}, {static_cast<T>(total)});
  if (tracking<T>({&x})) {
    attach<T>(result, {x.node_ptr()}, [](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (auto& v : g) v += self.grad[0];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

template <class T>
BasicTensor<T> cross_entropy_label_smoothed(
    const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
    double eps, std::int32_t pad_id) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                     " do not match " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  std::size_t count = 0;
  for (auto l : labels) {
    if (l == pad_id) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= v) {
      throw ShapeError("cross_entropy: label " + std::to_string(l) +
                       " out of range for V=" + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every label is padding");

  auto probs = std::make_shared<std::vector<T>>(logits.numel(), T(0));
  double total = 0.0;
  const double off = eps / static_cast<double>(v);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] == pad_id) continue;
    const T* x = logits.data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, double(x[j]));
    double z = 0.0, xsum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      z += std::exp(x[j] - mx);
      xsum += x[j];
    }
    const double lse = mx + std::log(z);
    total += lse - (1.0 - eps) * x[labels[r]] - off * xsum;
    for (std::size_t j = 0; j < v; ++j) {
      (*probs)[r * v + j] = static_cast<T>(std::exp(x[j] - lse));
    }
  }
  auto result =
      make<T>({}, {static_cast<T>(total / static_cast<double>(count))});
  if (tracking<T>({&logits})) {
    std::vector<std::int32_t> saved(labels.begin(), labels.end());
    attach<T>(result, {logits.node_ptr()},
              [probs, saved = std::move(saved), eps, off, pad_id, v,
               count](Node<T>& self) {
                T* g = self.parents[0]->ensure_grad().data();
                const double scale_g = self.grad[0] / static_cast<double>(count);
                for (std::size_t r = 0; r < saved.size(); ++r) {
                  if (saved[r] == pad_id) continue;
                  for (std::size_t j = 0; j < v; ++j) {
                    double q = off;
                    if (static_cast<std::int32_t>(j) == saved[r]) q += 1.0 - eps;
                    g[r * v + j] += static_cast<T>(
                        ((*probs)[r * v + j] - q) * scale_g);
                  }
                }
              });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(
    const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
    std::vector<Tensor64> inputs, const GradCheckOptions& opts) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor64 loss = f(inputs);
    tape.backward(loss);
  }
  Rng rng = derive_rng({opts.seed, 0x6772616463686b});
  double worst = 0.0;
  for (auto& in : inputs) {
    std::vector<double> analytic = in.grad();
    if (analytic.empty()) analytic.assign(in.numel(), 0.0);
    std::vector<std::size_t> idx(in.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opts.max_elements) {
      for (std::size_t i = 0; i < opts.max_elements; ++i) {
        std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      }
      idx.resize(opts.max_elements);
    }
    for (std::size_t i : idx) {
      double& x = in.values()[i];
      const double orig = x;
      x = orig + opts.h;
      const double fp = f(inputs).item();
      x = orig - opts.h;
      const double fm = f(inputs).item();
      x = orig;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) /
                         std::max({1e-3, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Instantiations

#define IBKT_INSTANTIATE(T)                                                   \
  template class BasicTensor<T>;                                              \
  template class Tape<T>;                                                     \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&);                   \
  template BasicTensor<T> bmm(const BasicTensor<T>&, const BasicTensor<T>&,   \
                              bool);                                          \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                    \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&, int);            \
  template BasicTensor<T> layernorm(const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&, T);                \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                        \
  template BasicTensor<T> embedding(const BasicTensor<T>&,                    \
                                    std::span<const std::int32_t>);           \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, bool); \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);    \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t,      \
                                std::size_t);                                 \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);              \
  template BasicTensor<T> permute(const BasicTensor<T>&,                      \
                                  const std::vector<int>&);                   \
  template BasicTensor<T> sum(const BasicTensor<T>&);                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                        \
  template BasicTensor<T> cross_entropy_label_smoothed(                       \
      const BasicTensor<T>&, std::span<const std::int32_t>, double,           \
      std::int32_t);

IBKT_INSTANTIATE(float)
IBKT_INSTANTIATE(double)

#undef IBKT_INSTANTIATE

}  // namespace ibkt::tensor
