// Copyright 2026 The SimCut Lab Authors
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

// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//
// Every primitive returns a fresh Tensor. When gradient recording is enabled
// and at least one input requires a gradient, the result keeps references to
// its inputs together with a backward closure; the graph reachable from a loss
// is the tape. backward() orders that graph topologically and visits each node
// exactly once. Graphs are released with the last Tensor referring to them, so
// one training step builds and drops its own tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simcut/rng.hpp"

namespace simcut {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;
using ByteMask = std::vector<std::uint8_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables tape recording for its lifetime (evaluation, decoding, optimizer).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct TensorImpl;

/// Backward closure: adds d(loss)/d(input_i) into grad_in[i] (null when that
/// input does not require a gradient).
using BackwardFn = std::function<void(const TensorImpl& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>*> grad_in)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size()) {
      throw Error("Tensor::from: shape " + shape_str(shape) + " does not match " +
                  std::to_string(data.size()) + " values");
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> values() const { return impl_->data; }
  /// In-place access for leaves (optimizer updates, finite differences).
  std::span<double> mutable_values() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw Error("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

  /// Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), impl_->data, requires_grad);
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                        std::initializer_list<Tensor> inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      impl->requires_grad = true;
      impl->op = op;
      for (const auto& t : inputs) impl->inputs.push_back(t.shared());
      impl->backward = std::move(backward);
    }
  }
  return Tensor(std::move(impl));
}

inline Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                        const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      impl->requires_grad = true;
      impl->op = op;
      for (const auto& t : inputs) impl->inputs.push_back(t.shared());
      impl->backward = std::move(backward);
    }
  }
  return Tensor(std::move(impl));
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b,
                                     const std::string& what = "shapes do not conform") {
  throw Error(std::string(op) + ": " + what + " (" + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()) + ")");
}

/// b broadcasts against a when b's shape is a suffix of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

// C[MxN] += A[MxK] * B[KxN], all row-major. Each output element accumulates
// over k in ascending order regardless of M and N, so a row's result does not
// depend on how many other rows share the call.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transpose_copy(const double* src, std::size_t rows,
                                          std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

inline void topo_visit(TensorImpl* root, std::vector<TensorImpl*>& order) {
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

/// Runs reverse accumulation from a scalar root. Gradient buffers of nodes in
/// `keep` and of leaves survive; interior buffers are released as soon as
/// they have been propagated.
inline std::unordered_map<const TensorImpl*, std::vector<double>> backprop(
    const Tensor& loss, const std::unordered_set<const TensorImpl*>& keep,
    std::vector<TensorImpl*>* order_out = nullptr) {
  if (loss.numel() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  std::unordered_map<const TensorImpl*, std::vector<double>> grads;
  if (!loss.requires_grad()) return grads;
  std::vector<TensorImpl*> order;
  topo_visit(loss.impl(), order);
  grads[loss.impl()] = {1.0};
  std::vector<std::vector<double>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->is_leaf()) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      TensorImpl* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& buf = grads[in];
      if (buf.empty()) buf.assign(in->data.size(), 0.0);
      slots[i] = &buf;
    }
    // `found` may be invalidated by insertions above only in iterator terms;
    // element references of unordered_map are stable.
    const std::vector<double>& gout = grads.at(node);
    node->backward(*node, gout, slots);
    if (!keep.contains(node)) {
      auto& mine = grads.at(node);
      std::vector<double>().swap(mine);
    }
  }
  if (order_out) *order_out = std::move(order);
  return grads;
}

}  // namespace detail

/// Populates .grad() of every requires-grad leaf reachable from `loss`.
/// Gradients accumulate additively across calls until zero_grad().
inline void backward(const Tensor& loss) {
  std::vector<TensorImpl*> order;
  auto grads = detail::backprop(loss, {}, &order);
  for (TensorImpl* node : order) {
    if (!node->is_leaf() || !node->requires_grad) continue;
    auto it = grads.find(node);
    if (it == grads.end() || it->second.empty()) continue;
    if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
    for (std::size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += it->second[i];
  }
}

/// Returns d(loss)/d(t) for each requested tensor (leaf or interior) without
/// touching any leaf's accumulated gradient. Unreachable tensors get zeros.
inline std::vector<std::vector<double>> gradients(const Tensor& loss,
                                                  std::span<const Tensor> wrt) {
  std::unordered_set<const TensorImpl*> keep;
  for (const auto& t : wrt) keep.insert(t.impl());
  auto grads = detail::backprop(loss, keep);
  std::vector<std::vector<double>> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = grads.find(t.impl());
    if (it == grads.end() || it->second.empty())
      out.emplace_back(t.numel(), 0.0);
    else
      out.push_back(it->second);
  }
  return out;
}

inline std::vector<double> gradient(const Tensor& loss, const Tensor& wrt) {
  return gradients(loss, std::span<const Tensor>(&wrt, 1)).front();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand may broadcast when its shape is a
// suffix of the first's (bias vectors, positional tables, scalars).

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) detail::shape_error("add", a, b);
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % nb];
  return detail::make_node("add", a.shape(), std::move(out), {a, b},
                           [n, nb](const TensorImpl&, std::span<const double> g,
                                   std::span<std::vector<double>*> gin) {
                             if (gin[0])
                               for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i];
                             if (gin[1])
                               for (std::size_t i = 0; i < n; ++i) (*gin[1])[i % nb] += g[i];
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) detail::shape_error("sub", a, b);
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % nb];
  return detail::make_node("sub", a.shape(), std::move(out), {a, b},
                           [n, nb](const TensorImpl&, std::span<const double> g,
                                   std::span<std::vector<double>*> gin) {
                             if (gin[0])
                               for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i];
                             if (gin[1])
                               for (std::size_t i = 0; i < n; ++i) (*gin[1])[i % nb] -= g[i];
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) detail::shape_error("mul", a, b);
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % nb];
  return detail::make_node("mul", a.shape(), std::move(out), {a, b},
                           [n, nb](const TensorImpl& self, std::span<const double> g,
                                   std::span<std::vector<double>*> gin) {
                             const auto& x = self.inputs[0]->data;
                             const auto& y = self.inputs[1]->data;
                             if (gin[0])
                               for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i] * y[i % nb];
                             if (gin[1])
                               for (std::size_t i = 0; i < n; ++i) (*gin[1])[i % nb] += g[i] * x[i];
                           });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  return detail::make_node("scale", a.shape(), std::move(out), {a},
                           [c](const TensorImpl&, std::span<const double> g,
                               std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += c * g[i];
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout.

/// Matrix product of rank-2 operands, or batched product of rank-3 operands
/// with equal leading dimension. With transpose_b, b is read as its transpose
/// over the last two axes.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)))
    detail::shape_error("matmul", a, b, "operands must both be rank 2 or both rank 3");
  const std::size_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) detail::shape_error("matmul", a, b, "batch sizes differ");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t bk = transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::size_t n = transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (bk != k) detail::shape_error("matmul", a, b, "inner dimensions differ");

  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.values().data();
  const double* bd = b.values().data();
  for (std::size_t s = 0; s < batch; ++s) {
    const double* bs = bd + s * k * n;
    if (transpose_b) {
      auto bt = detail::transpose_copy(bs, n, k);
      detail::gemm_acc(ad + s * m * k, bt.data(), out.data() + s * m * n, m, k, n);
    } else {
      detail::gemm_acc(ad + s * m * k, bs, out.data() + s * m * n, m, k, n);
    }
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_node(
      "matmul", std::move(shape), std::move(out), {a, b},
      [batch, m, k, n, transpose_b](const TensorImpl& self, std::span<const double> g,
                                     std::span<std::vector<double>*> gin) {
        const double* ad = self.inputs[0]->data.data();
        const double* bd = self.inputs[1]->data.data();
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gs = g.data() + s * m * n;
          const double* as = ad + s * m * k;
          const double* bs = bd + s * k * n;
          if (gin[0]) {
            double* ga = gin[0]->data() + s * m * k;
            if (transpose_b) {
              // b is [n,k]: dA = G * B
              detail::gemm_acc(gs, bs, ga, m, n, k);
            } else {
              auto bt = detail::transpose_copy(bs, k, n);
              detail::gemm_acc(gs, bt.data(), ga, m, n, k);
            }
          }
          if (gin[1]) {
            double* gb = gin[1]->data() + s * k * n;
            if (transpose_b) {
              // dB[n,k] = G^T * A
              auto gt = detail::transpose_copy(gs, m, n);
              detail::gemm_acc(gt.data(), as, gb, n, m, k);
            } else {
              auto at = detail::transpose_copy(as, m, k);
              detail::gemm_acc(at.data(), gs, gb, k, m, n);
            }
          }
        }
      });
}

/// Swaps the last two axes (rank 2 or 3).
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3)
    throw Error("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  std::vector<double> out(a.numel());
  for (std::size_t s = 0; s < batch; ++s) {
    auto t = detail::transpose_copy(a.values().data() + s * r * c, r, c);
    std::copy(t.begin(), t.end(), out.begin() + static_cast<std::ptrdiff_t>(s * r * c));
  }
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return detail::make_node("transpose", std::move(shape), std::move(out), {a},
                           [batch, r, c](const TensorImpl&, std::span<const double> g,
                                         std::span<std::vector<double>*> gin) {
                             for (std::size_t s = 0; s < batch; ++s)
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   (*gin[0])[s * r * c + i * c + j] += g[s * r * c + j * r + i];
                           });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw Error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_node("reshape", std::move(shape), std::move(out), {a},
                           [](const TensorImpl&, std::span<const double> g,
                              std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           });
}

/// [A,B,C,D] -> [A,C,B,D]. Used to split and merge attention heads.
inline Tensor swap_middle_axes(const Tensor& a) {
  if (a.rank() != 4) throw Error("swap_middle_axes: expected rank 4, got " + shape_str(a.shape()));
  const std::size_t n0 = a.dim(0), n1 = a.dim(1), n2 = a.dim(2), n3 = a.dim(3);
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < n0; ++i)
    for (std::size_t j = 0; j < n1; ++j)
      for (std::size_t k = 0; k < n2; ++k) {
        const double* src = av.data() + ((i * n1 + j) * n2 + k) * n3;
        double* dst = out.data() + ((i * n2 + k) * n1 + j) * n3;
        std::copy(src, src + n3, dst);
      }
  return detail::make_node("swap_middle_axes", {n0, n2, n1, n3}, std::move(out), {a},
                           [n0, n1, n2, n3](const TensorImpl&, std::span<const double> g,
                                            std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < n0; ++i)
                               for (std::size_t j = 0; j < n1; ++j)
                                 for (std::size_t k = 0; k < n2; ++k) {
                                   double* dst = gin[0]->data() + ((i * n1 + j) * n2 + k) * n3;
                                   const double* src = g.data() + ((i * n2 + k) * n1 + j) * n3;
                                   for (std::size_t l = 0; l < n3; ++l) dst[l] += src[l];
                                 }
                           });
}

/// Concatenates along the first axis; trailing dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw Error("concat: scalar inputs are not supported");
  shape[0] = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1))
      detail::shape_error("concat", parts.front(), p, "trailing dimensions differ");
    shape[0] += p.dim(0);
    sizes.push_back(p.numel());
  }
  std::vector<double> out;
  out.reserve(numel_of(shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_node("concat", std::move(shape), std::move(out), parts,
                           [sizes](const TensorImpl&, std::span<const double> g,
                                   std::span<std::vector<double>*> gin) {
                             std::size_t offset = 0;
                             for (std::size_t p = 0; p < sizes.size(); ++p) {
                               if (gin[p])
                                 for (std::size_t i = 0; i < sizes[p]; ++i)
                                   (*gin[p])[i] += g[offset + i];
                               offset += sizes[p];
                             }
                           });
}

/// Gathers rows of a [V,d] table; result is [ids.size(), d].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw Error("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw Error("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                  std::to_string(vocab));
    const double* row = table.values().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_node("embedding", {ids.size(), d}, std::move(out), {table},
                           [idx = std::move(idx), d](const TensorImpl&, std::span<const double> g,
                                                     std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               double* row = gin[0]->data() + static_cast<std::size_t>(idx[i]) * d;
                               for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                             }
                           });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizers (last axis).

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_node("relu", a.shape(), std::move(out), {a},
                           [](const TensorImpl& self, std::span<const double> g,
                              std::span<std::vector<double>*> gin) {
                             const auto& x = self.inputs[0]->data;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (x[i] > 0.0) (*gin[0])[i] += g[i];
                           });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() == 0) throw Error("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    detail::shape_error("layer_norm", x, gain, "gain/bias must match the last axis");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_node(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const TensorImpl& self, std::span<const double> g, std::span<std::vector<double>*> gin) {
        const auto& gv = self.inputs[1]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* hr = xhat.data() + r * d;
          if (gin[1])
            for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += gr[j] * hr[j];
          if (gin[2])
            for (std::size_t j = 0; j < d; ++j) (*gin[2])[j] += gr[j];
          if (gin[0]) {
            double sum_gh = 0.0, sum_g = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = gr[j] * gv[j];
              sum_g += gh;
              sum_gh += gh * hr[j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            double* out = gin[0]->data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = gr[j] * gv[j];
              out[j] += inv_std[r] * (gh - inv_d * sum_g - hr[j] * inv_d * sum_gh);
            }
          }
        }
      });
}

inline Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw Error("softmax: scalar input");
  const std::size_t d = a.shape().back(), rows = a.numel() / d;
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return detail::make_node("softmax", a.shape(), std::move(out), {a},
                           [d, rows](const TensorImpl& self, std::span<const double> g,
                                     std::span<std::vector<double>*> gin) {
                             const auto& y = self.data;
                             for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                               for (std::size_t j = 0; j < d; ++j)
                                 (*gin[0])[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
                             }
                           });
}

inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 0) throw Error("log_softmax: scalar input");
  const std::size_t d = a.shape().back(), rows = a.numel() / d;
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] - lz;
  }
  return detail::make_node("log_softmax", a.shape(), std::move(out), {a},
                           [d, rows](const TensorImpl& self, std::span<const double> g,
                                     std::span<std::vector<double>*> gin) {
                             const auto& y = self.data;
                             for (std::size_t r = 0; r < rows; ++r) {
                               double gs = 0.0;
                               for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
                               for (std::size_t j = 0; j < d; ++j)
                                 (*gin[0])[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
                             }
                           });
}

/// log(max(x, floor)); the gradient is zero where the floor is active.
inline Tensor log_clamped(const Tensor& a, double floor = 1e-12) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return detail::make_node("log_clamped", a.shape(), std::move(out), {a},
                           [floor](const TensorImpl& self, std::span<const double> g,
                                   std::span<std::vector<double>*> gin) {
                             const auto& x = self.inputs[0]->data;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (x[i] > floor) (*gin[0])[i] += g[i] / x[i];
                           });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_node("sum", {}, {s}, {a},
                           [](const TensorImpl& self, std::span<const double> g,
                              std::span<std::vector<double>*> gin) {
                             const std::size_t n = self.inputs[0]->data.size();
                             for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[0];
                           });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sums over the last axis: [..., d] -> [...].
inline Tensor sum_last_axis(const Tensor& a) {
  if (a.rank() == 0) throw Error("sum_last_axis: scalar input");
  const std::size_t d = a.shape().back(), rows = a.numel() / d;
  std::vector<double> out(rows, 0.0);
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += av[r * d + j];
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return detail::make_node("sum_last_axis", std::move(shape), std::move(out), {a},
                           [d, rows](const TensorImpl&, std::span<const double> g,
                                     std::span<std::vector<double>*> gin) {
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < d; ++j) (*gin[0])[r * d + j] += g[r];
                           });
}

/// Scalar sum_i weights[i] * a[i] with constant weights.
inline Tensor weighted_sum(const Tensor& a, std::vector<double> weights) {
  if (weights.size() != a.numel())
    throw Error("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor of shape " +
                shape_str(a.shape()));
  double s = 0.0;
  const auto av = a.values();
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * av[i];
  return detail::make_node("weighted_sum", {}, {s}, {a},
                           [w = std::move(weights)](const TensorImpl&, std::span<const double> g,
                                                    std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < w.size(); ++i) (*gin[0])[i] += g[0] * w[i];
                           });
}

/// Selects one entry per row along the last axis: [..., d] -> [...].
inline Tensor pick(const Tensor& a, std::span<const int> index) {
  if (a.rank() == 0) throw Error("pick: scalar input");
  const std::size_t d = a.shape().back(), rows = a.numel() / d;
  if (index.size() != rows)
    throw Error("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(rows) +
                " rows of " + shape_str(a.shape()));
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= d)
      throw Error("pick: index " + std::to_string(index[r]) + " out of range " + std::to_string(d));
    out[r] = a.values()[r * d + static_cast<std::size_t>(index[r])];
  }
  std::vector<int> idx(index.begin(), index.end());
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return detail::make_node("pick", std::move(shape), std::move(out), {a},
                           [d, idx = std::move(idx)](const TensorImpl&, std::span<const double> g,
                                                     std::span<std::vector<double>*> gin) {
                             for (std::size_t r = 0; r < idx.size(); ++r)
                               (*gin[0])[r * d + static_cast<std::size_t>(idx[r])] += g[r];
                           });
}

// ---------------------------------------------------------------------------
// Masking, dropout, stop-gradient.

/// Replaces entries where mask != 0 with `value`. The mask either covers
/// every element or is a row mask over the leading axes (one byte per
/// last-axis row).
inline Tensor masked_fill(const Tensor& a, const ByteMask& mask, double value) {
  const std::size_t n = a.numel();
  std::size_t group = 1;
  if (mask.size() != n) {
    const std::size_t d = a.rank() ? a.shape().back() : 1;
    if (mask.size() * d != n)
      throw Error("masked_fill: mask of " + std::to_string(mask.size()) +
                  " entries does not fit tensor " + shape_str(a.shape()));
    group = d;
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i / group]) out[i] = value;
  return detail::make_node("masked_fill", a.shape(), std::move(out), {a},
                           [mask, group](const TensorImpl&, std::span<const double> g,
                                         std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (!mask[i / group]) (*gin[0])[i] += g[i];
                           });
}

enum class Mode { kTrain, kEval };

/// Inverted dropout: survivors are scaled by 1/(1-rate) so evaluation is a
/// no-op. One uniform draw per element in row-major order.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng, Mode mode = Mode::kTrain) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw Error("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::kEval || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(a.numel());
  for (double& f : factor) f = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor[i];
  return detail::make_node("dropout", a.shape(), std::move(out), {a},
                           [factor = std::move(factor)](const TensorImpl&, std::span<const double> g,
                                                        std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor[i];
                           });
}

/// Identity in the forward pass; blocks every gradient in the backward pass.
inline Tensor stop_gradient(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<double>(a.values().begin(), a.values().end()), false);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12)
/// for a scalar function of `x`. `f` must be deterministic. When `coords` is
/// empty every coordinate is checked.
template <class F>
double finite_difference_check(F&& f, Tensor x, double step = 1e-5,
                               std::span<const std::size_t> coords = {}) {
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tensor loss = f(x);
    analytic = gradient(loss, x);
  }
  x.set_requires_grad(had);
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  NoGradGuard no_grad;
  auto values = x.mutable_values();
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f(x).item();
    values[i] = saved - step;
    const double down = f(x).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err =
        std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace simcut
