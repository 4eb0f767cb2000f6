#pragma once

// Minimal dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward rule; backward() on a
// scalar walks the recorded graph in reverse topological order. Recording is
// switched off per thread with NoGradGuard.
//
// Operators work on the matrix view of a tensor: rank-2 tensors are
// rows x cols, rank-1 tensors are a single row and rank-0 tensors are 1x1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "topforge/errors.hpp"

#ifndef TOPFORGE_REAL
#define TOPFORGE_REAL double
#endif

namespace topforge {

using real = TOPFORGE_REAL;
using Shape = std::vector<std::size_t>;

// Stand-in for -infinity in masked positions; exp() of it underflows to an
// exact zero without producing NaN in max-shifted softmax.
inline constexpr real kMaskedValue = std::numeric_limits<real>::lowest();

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  std::vector<real>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

inline bool grad_mode_enabled() noexcept { return detail::grad_enabled; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<real> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    if (shape.size() > 2) throw ShapeError("tensors of rank > 2 are not supported: " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
  }
  static Tensor full(Shape shape, real value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<real>(n, value));
  }
  static Tensor scalar(real v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<real> data, bool requires_grad = false) {
    return Tensor({r, c}, std::move(data), requires_grad);
  }
  static Tensor vector(std::vector<real> data, bool requires_grad = false) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->rows(); }
  std::size_t cols() const { return node_->cols(); }

  std::span<const real> data() const { return node_->data; }
  // Mutable access for parameter updates and perturbation; never call on a
  // tensor whose graph is still needed for backward.
  std::span<real> mutable_data() { return node_->data; }

  real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  real at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  real operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const real> grad() const { return node_->grad; }
  std::span<real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), real(0)); }

  // New leaf holding a copy of the data, outside any graph.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  // Populates grad of every requires_grad leaf reachable from this scalar.
  // Leaf gradients accumulate across calls.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_result(Shape, std::vector<real>, std::vector<Tensor>, std::function<void(detail::Node&)>);
};

// Wraps an op's forward output; records parents and the backward rule only
// when recording is on and some input requires a gradient.
inline Tensor make_op_result(Shape shape, std::vector<real> data, std::vector<Tensor> inputs,
                             std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (detail::grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void Tensor::backward() const {
  if (!node_) throw ContractViolation("backward on an undefined tensor");
  if (numel() != 1)
    throw ContractViolation("backward requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      detail::Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order)
    if (n->backward) n->grad.assign(n->data.size(), real(0));
  node_->ensure_grad()[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Operators

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

inline bool wants_grad(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

}  // namespace detail

// (r x k) @ (k x c) -> r x c
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows() || b.rank() != 2)
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  std::vector<real> out(r * c, real(0));
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const real av = A[i * k + p];
      if (av == real(0)) continue;
      const real* brow = &B[p * c];
      real* orow = &out[i * c];
      for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  return make_op_result({r, c}, std::move(out), {a, b}, [r, k, c](detail::Node& n) {
    auto& na = detail::parent(n, 0);
    auto& nb = detail::parent(n, 1);
    const auto& G = n.grad;
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          real s = 0;
          for (std::size_t j = 0; j < c; ++j) s += G[i * c + j] * nb.data[p * c + j];
          ga[i * k + p] += s;
        }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const real av = na.data[i * k + p];
          if (av == real(0)) continue;
          for (std::size_t j = 0; j < c; ++j) gb[p * c + j] += av * G[i * c + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<real> out(r * c);
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return make_op_result({c, r}, std::move(out), {a}, [r, c](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

// Elementwise sum. b may also be a single row, broadcast over a's rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = a.shape() != b.shape();
  if (broadcast && !(b.rows() == 1 && b.cols() == a.cols() && a.rank() == 2))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t c = a.cols();
  std::vector<real> out(a.data().begin(), a.data().end());
  const auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[broadcast ? i % c : i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [broadcast, c](detail::Node& n) {
    auto& na = detail::parent(n, 0);
    auto& nb = detail::parent(n, 1);
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[broadcast ? i % c : i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::parent(n, 0).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::parent(n, 1).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& na = detail::parent(n, 0);
    auto& nb = detail::parent(n, 1);
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * na.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, real s) {
  std::vector<real> out(a.data().begin(), a.data().end());
  for (real& v : out) v *= s;
  return make_op_result(a.shape(), std::move(out), {a}, [s](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  return make_op_result(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (real(1) - n.data[i] * n.data[i]);
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a[i] > real(0))) throw InvalidArgument("log: non-positive input");
    out[i] = std::log(a[i]);
  }
  return make_op_result(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto& p = detail::parent(n, 0);
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / p.data[i];
  });
}

// Sum of all entries -> scalar.
inline Tensor sum(const Tensor& a) {
  real s = 0;
  for (real v : a.data()) s += v;
  return make_op_result({}, {s}, {a}, [](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (real& v : g) v += n.grad[0];
  });
}

// Mean along axis 0 (-> 1 x cols) or axis 1 (-> rows x 1).
inline Tensor mean(const Tensor& a, int axis) {
  const std::size_t r = a.rows(), c = a.cols();
  if (axis != 0 && axis != 1) throw ShapeError("mean: axis must be 0 or 1");
  if (r == 0 || c == 0) throw ShapeError("mean: empty tensor " + shape_str(a.shape()));
  const auto A = a.data();
  if (axis == 0) {
    std::vector<real> out(c, real(0));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
    for (real& v : out) v /= static_cast<real>(r);
    return make_op_result({1, c}, std::move(out), {a}, [r, c](detail::Node& n) {
      auto& g = detail::parent(n, 0).ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j] / static_cast<real>(r);
    });
  }
  std::vector<real> out(r, real(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += A[i * c + j];
  for (real& v : out) v /= static_cast<real>(c);
  return make_op_result({r, 1}, std::move(out), {a}, [r, c](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i] / static_cast<real>(c);
  });
}

// Concatenation along the last dimension; all parts must have equal rows.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> offs;
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r)
      throw ShapeError("concat: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    offs.push_back(c);
    c += p.cols();
  }
  std::vector<real> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t pc = parts[k].cols();
    const auto P = parts[k].data();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(&P[i * pc], pc, &out[i * c + offs[k]]);
  }
  Shape shape = parts[0].rank() == 2 ? Shape{r, c} : Shape{c};
  return make_op_result(std::move(shape), std::move(out), parts, [r, c, offs](detail::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const std::size_t pc = p.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += n.grad[i * c + offs[k] + j];
    }
  });
}

// Stacks matrices vertically; all parts must have equal cols.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    if (p.cols() != c)
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    offs.push_back(r * c);
    r += p.rows();
  }
  std::vector<real> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op_result({r, c}, std::move(out), parts, [offs](detail::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offs[k] + i];
    }
  });
}

// Rows of a selected by index (repeats allowed).
inline Tensor gather(const Tensor& a, const std::vector<std::size_t>& rows) {
  const std::size_t c = a.cols();
  std::vector<real> out;
  out.reserve(rows.size() * c);
  for (std::size_t r : rows) {
    if (r >= a.rows()) throw ShapeError("gather: row " + std::to_string(r) + " outside " + shape_str(a.shape()));
    out.insert(out.end(), a.data().begin() + static_cast<std::ptrdiff_t>(r * c),
               a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  }
  return make_op_result({rows.size(), c}, std::move(out), {a}, [rows, c](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) g[rows[k] * c + j] += n.grad[k * c + j];
  });
}

// Contiguous row range [begin, begin + count).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw ShapeError("slice_rows: range outside " + shape_str(a.shape()));
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(a, idx);
}

// Contiguous column range [begin, begin + count).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin + count > c) throw ShapeError("slice_cols: range outside " + shape_str(a.shape()));
  std::vector<real> out(r * count);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(&a.data()[i * c + begin], count, &out[i * count]);
  return make_op_result({r, count}, std::move(out), {a}, [r, c, begin, count](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += n.grad[i * count + j];
  });
}

// Single entry (row, col) -> scalar.
inline Tensor pick(const Tensor& a, std::size_t row, std::size_t col) {
  if (row >= a.rows() || col >= a.cols())
    throw ShapeError("pick: (" + std::to_string(row) + "," + std::to_string(col) + ") outside " + shape_str(a.shape()));
  const std::size_t idx = row * a.cols() + col;
  return make_op_result({}, {a[idx]}, {a}, [idx](detail::Node& n) {
    detail::parent(n, 0).ensure_grad()[idx] += n.grad[0];
  });
}

// Boolean mask laid out like the tensor's data.
using Mask = std::vector<char>;

// Replaces entries whose mask flag is set by value. Filled entries get zero
// gradient.
inline Tensor masked_fill(const Tensor& a, const Mask& fill, real value) {
  if (fill.size() != a.numel())
    throw ShapeError("masked_fill: mask of " + std::to_string(fill.size()) + " entries for tensor " +
                     shape_str(a.shape()));
  std::vector<real> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (fill[i]) out[i] = value;
  return make_op_result(a.shape(), std::move(out), {a}, [fill](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!fill[i]) g[i] += n.grad[i];
  });
}

// Row-wise softmax. Entries at kMaskedValue come out as exact zeros; a row
// made only of such entries is an invalid mask.
inline Tensor softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<real> out(r * c);
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const real* row = &A[i * c];
    const real mx = *std::max_element(row, row + c);
    if (mx <= kMaskedValue) throw InvalidMask("softmax: row " + std::to_string(i) + " is fully masked");
    real s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const real e = row[j] <= kMaskedValue ? real(0) : std::exp(row[j] - mx);
      out[i * c + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return make_op_result(a.shape(), std::move(out), {a}, [r, c](detail::Node& n) {
    auto& g = detail::parent(n, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.data[i * c + j] * (n.grad[i * c + j] - dot);
    }
  });
}

// x @ W + b with W stored (in x out) and b of length out. b may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = real(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm: affine shape " + shape_str(gamma.shape()) + " for input " + shape_str(x.shape()));
  std::vector<real> out(r * c), xhat(r * c), inv_std(r);
  const auto X = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    real mu = 0, var = 0;
    for (std::size_t j = 0; j < c; ++j) mu += X[i * c + j];
    mu /= static_cast<real>(c);
    for (std::size_t j = 0; j < c; ++j) var += (X[i * c + j] - mu) * (X[i * c + j] - mu);
    var /= static_cast<real>(c);
    inv_std[i] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gamma[j] + beta[j];
    }
  }
  return make_op_result(x.shape(), std::move(out), {x, gamma, beta},
                        [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& n) {
                          auto& nx = detail::parent(n, 0);
                          auto& ng = detail::parent(n, 1);
                          auto& nb = detail::parent(n, 2);
                          if (ng.requires_grad) {
                            auto& g = ng.ensure_grad();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j] * xhat[i * c + j];
                          }
                          if (nb.requires_grad) {
                            auto& g = nb.ensure_grad();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
                          }
                          if (nx.requires_grad) {
                            auto& g = nx.ensure_grad();
                            const real cn = static_cast<real>(c);
                            for (std::size_t i = 0; i < r; ++i) {
                              real s1 = 0, s2 = 0;
                              for (std::size_t j = 0; j < c; ++j) {
                                const real dxh = n.grad[i * c + j] * ng.data[j];
                                s1 += dxh;
                                s2 += dxh * xhat[i * c + j];
                              }
                              for (std::size_t j = 0; j < c; ++j) {
                                const real dxh = n.grad[i * c + j] * ng.data[j];
                                g[i * c + j] += inv_std[i] / cn * (cn * dxh - s1 - xhat[i * c + j] * s2);
                              }
                            }
                          }
                        });
}

// Running statistics of a batch-norm layer. Updated in training mode as
// running = momentum * running + (1 - momentum) * batch.
struct RunningStats {
  Tensor mean;
  Tensor var;
};

inline constexpr real kBatchNormMomentum = real(0.9);
inline constexpr real kNormEps = real(1e-5);

// Normalizes each column over all rows. In training mode the statistics come
// from the rows of x (and the running stats are updated); otherwise the frozen
// running statistics are used and the op is a fixed affine map.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                         bool training, real momentum = kBatchNormMomentum, real eps = kNormEps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c || stats.mean.numel() != c || stats.var.numel() != c)
    throw ShapeError("batch_norm: parameter shape " + shape_str(gamma.shape()) + " for input " + shape_str(x.shape()));
  const auto X = x.data();
  std::vector<real> mu(c, real(0)), var(c, real(0));
  if (training) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) mu[j] += X[i * c + j];
    for (real& v : mu) v /= static_cast<real>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) var[j] += (X[i * c + j] - mu[j]) * (X[i * c + j] - mu[j]);
    for (real& v : var) v /= static_cast<real>(r);
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    const real unbias = r > 1 ? static_cast<real>(r) / static_cast<real>(r - 1) : real(1);
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = momentum * rm[j] + (real(1) - momentum) * mu[j];
      rv[j] = momentum * rv[j] + (real(1) - momentum) * var[j] * unbias;
    }
  } else {
    std::copy(stats.mean.data().begin(), stats.mean.data().end(), mu.begin());
    std::copy(stats.var.data().begin(), stats.var.data().end(), var.begin());
  }
  std::vector<real> inv_std(c), xhat(r * c), out(r * c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = real(1) / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X[i * c + j] - mu[j]) * inv_std[j];
      out[i * c + j] = xhat[i * c + j] * gamma[j] + beta[j];
    }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [r, c, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& n) {
        auto& nx = detail::parent(n, 0);
        auto& ng = detail::parent(n, 1);
        auto& nb = detail::parent(n, 2);
        if (ng.requires_grad) {
          auto& g = ng.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j] * xhat[i * c + j];
        }
        if (nb.requires_grad) {
          auto& g = nb.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
        }
        if (!nx.requires_grad) return;
        auto& g = nx.ensure_grad();
        if (!training) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * ng.data[j] * inv_std[j];
          return;
        }
        const real rn = static_cast<real>(r);
        for (std::size_t j = 0; j < c; ++j) {
          real s1 = 0, s2 = 0;
          for (std::size_t i = 0; i < r; ++i) {
            const real dxh = n.grad[i * c + j] * ng.data[j];
            s1 += dxh;
            s2 += dxh * xhat[i * c + j];
          }
          for (std::size_t i = 0; i < r; ++i) {
            const real dxh = n.grad[i * c + j] * ng.data[j];
            g[i * c + j] += inv_std[j] / rn * (rn * dxh - s1 - xhat[i * c + j] * s2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient verification

// Compares the gradient of f at x from backward() against central
// differences. x is perturbed in place and restored. Returns the largest
// coordinate-wise |a - b| / max(|a|, |b|, 1e-8).
inline real finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, real step) {
  const bool was = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tensor y = f(x);
    y.backward();
  }
  const std::vector<real> analytic(x.grad().begin(), x.grad().end());
  auto xs = x.mutable_data();
  real worst = 0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const real orig = xs[i];
    xs[i] = orig + step;
    const real fp = f(x).item();
    xs[i] = orig - step;
    const real fm = f(x).item();
    xs[i] = orig;
    const real numeric = (fp - fm) / (real(2) * step);
    const real a = analytic[i];
    const real denom = std::max({std::abs(a), std::abs(numeric), real(1e-8)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  x.set_requires_grad(was);
  return worst;
}

}  // namespace topforge
