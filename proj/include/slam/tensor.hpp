#pragma once

// Reverse-mode autodiff over dense row-major arrays. Ops build a DAG of
// shared nodes; backward() walks it once in reverse topological order and
// accumulates gradients into every node that requires them. Scalar type is a
// template parameter: float for training, double for finite-difference
// gradient checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace slam {

using Shape = std::vector<int64_t>;

inline int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized lazily during backward
  bool requires_grad = false;
  bool backward_called = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  // Reads this->grad / value / parents, accumulates into parents' grads.
  std::function<void(Node<S>&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), S(0));
  }

  static Tensor filled(Shape shape, S v) {
    auto n = std::make_shared<Node<S>>();
    n->value.assign(static_cast<size_t>(shape_size(shape)), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) { return filled({1}, v); }

  static Tensor from_vector(Shape shape, std::vector<S> data) {
    if (static_cast<int64_t>(data.size()) != shape_size(shape))
      throw std::invalid_argument("from_vector: data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  // Leaf with requires_grad set: the parameter constructor.
  static Tensor leaf(Shape shape, std::vector<S> data) {
    Tensor t = from_vector(std::move(shape), std::move(data));
    t.n_->requires_grad = true;
    return t;
  }

  // Low-level op constructor. `backprop` may be empty when no parent needs
  // gradients; otherwise it must accumulate (+=) into parents' grads.
  static Tensor make_op(Shape shape, std::vector<S> value,
                        std::vector<Tensor> parents,
                        std::function<void(Node<S>&)> backprop) {
    Tensor t = from_vector(std::move(shape), std::move(value));
    bool needs = false;
    t.n_->parents.reserve(parents.size());
    for (auto& p : parents) {
      if (!p.defined()) throw std::invalid_argument("make_op: undefined parent");
      needs = needs || p.n_->requires_grad;
      t.n_->parents.push_back(p.n_);
    }
    t.n_->requires_grad = needs;
    if (needs) t.n_->backprop = std::move(backprop);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(n_->value.size()); }

  std::vector<S>& values() { return n_->value; }
  const std::vector<S>& values() const { return n_->value; }

  S item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }

  const std::vector<S>& grad() const {
    if (n_->grad.empty()) throw std::runtime_error("grad: no gradient present (backward not run or unreachable)");
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.assign(n_->value.size(), S(0)); }
  void drop_grad() { n_->grad.clear(); }

  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}
  std::shared_ptr<Node<S>> n_;
};

template <typename S>
inline void check_finite(const Tensor<S>& t, const std::string& what) {
  for (S v : t.values()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error("non-finite value in " + what);
  }
}

// Backward pass from a scalar loss. Every node reachable through
// grad-requiring parents receives an accumulated gradient. A second call on
// the same root is an error; build a fresh graph per step instead.
template <typename S>
inline void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw std::runtime_error("backward: loss is not finite");
  auto root = loss.node();
  if (root->backward_called) throw std::runtime_error("backward: already called on this loss; rebuild the graph");
  root->backward_called = true;

  // Iterative post-order DFS over grad-requiring nodes.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  if (root->requires_grad || root->backprop) {
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
  }
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Ops. Shapes are validated eagerly; there is no implicit broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<S> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[static_cast<size_t>(k)];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<S> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<S> out(a.size() > 0 ? a.values() : std::vector<S>{});
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.values());
  for (auto& v : out) v *= c;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [c](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

template <typename S>
Tensor<S> add_const(const Tensor<S>& a, S c) {
  std::vector<S> out(a.values());
  for (auto& v : out) v += c;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

// x: [..., d] plus bias b: [d] on the last axis.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw std::invalid_argument("add_bias: last axis of x must match bias length");
  int64_t d = b.dim(0);
  int64_t rows = d > 0 ? x.size() / d : 0;
  std::vector<S> out(x.values());
  const auto& bv = b.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] += bv[static_cast<size_t>(j)];
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, b}, [d, rows](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& pb = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) pb.grad[static_cast<size_t>(j)] += n.grad[static_cast<size_t>(r * d + j)];
    }
  });
}

// x: [B, T, d] plus y: [T, d] broadcast over the batch axis.
template <typename S>
Tensor<S> add_bcast_batch(const Tensor<S>& x, const Tensor<S>& y) {
  if (x.rank() != 3 || y.rank() != 2 || x.dim(1) != y.dim(0) || x.dim(2) != y.dim(1))
    throw std::invalid_argument("add_bcast_batch: need x [B,T,d] and y [T,d]");
  int64_t B = x.dim(0), inner = x.dim(1) * x.dim(2);
  std::vector<S> out(x.values());
  const auto& yv = y.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(b * inner + i)] += yv[static_cast<size_t>(i)];
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, y}, [B, inner](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& py = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    }
    if (py.requires_grad) {
      py.ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < inner; ++i) py.grad[static_cast<size_t>(i)] += n.grad[static_cast<size_t>(b * inner + i)];
    }
  });
}

// v: [d] tiled to [n, d]. Gradient sums over rows.
template <typename S>
Tensor<S> tile_rows(const Tensor<S>& v, int64_t n) {
  if (v.rank() != 1) throw std::invalid_argument("tile_rows: need rank-1 input");
  int64_t d = v.dim(0);
  std::vector<S> out(static_cast<size_t>(n * d));
  for (int64_t r = 0; r < n; ++r)
    std::copy(v.values().begin(), v.values().end(), out.begin() + static_cast<int64_t>(r * d));
  return Tensor<S>::make_op({n, d}, std::move(out), {v}, [n, d](Node<S>& node) {
    auto& p = *node.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t j = 0; j < d; ++j) p.grad[static_cast<size_t>(j)] += node.grad[static_cast<size_t>(r * d + j)];
  });
}

// 2D matrix product (m,k)x(k,n). 3D inputs with equal leading extent are
// treated as a batch of independent products.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    if (a.dim(1) != b.dim(0))
      throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(static_cast<size_t>(m * n));
    {
      detail::ConstMatMap<S> A(a.values().data(), m, k), B(b.values().data(), k, n);
      detail::MatMap<S> C(out.data(), m, n);
      C.noalias() = A * B;
    }
    return Tensor<S>::make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& node) {
      auto& pa = *node.parents[0];
      auto& pb = *node.parents[1];
      detail::ConstMatMap<S> G(node.grad.data(), m, n);
      if (pa.requires_grad) {
        pa.ensure_grad();
        detail::ConstMatMap<S> B(pb.value.data(), k, n);
        detail::MatMap<S> dA(pa.grad.data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        detail::ConstMatMap<S> A(pa.value.data(), m, k);
        detail::MatMap<S> dB(pb.grad.data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
      throw std::invalid_argument("matmul(batched): incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t N = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<S> out(static_cast<size_t>(N * m * n));
    for (int64_t i = 0; i < N; ++i) {
      detail::ConstMatMap<S> A(a.values().data() + i * m * k, m, k), B(b.values().data() + i * k * n, k, n);
      detail::MatMap<S> C(out.data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
    return Tensor<S>::make_op({N, m, n}, std::move(out), {a, b}, [N, m, k, n](Node<S>& node) {
      auto& pa = *node.parents[0];
      auto& pb = *node.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for (int64_t i = 0; i < N; ++i) {
        detail::ConstMatMap<S> G(node.grad.data() + i * m * n, m, n);
        if (pa.requires_grad) {
          detail::ConstMatMap<S> B(pb.value.data() + i * k * n, k, n);
          detail::MatMap<S> dA(pa.grad.data() + i * m * k, m, k);
          dA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
          detail::ConstMatMap<S> A(pa.value.data() + i * m * k, m, k);
          detail::MatMap<S> dB(pb.grad.data() + i * k * n, k, n);
          dB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  throw std::invalid_argument("matmul: expects two 2D or two 3D tensors");
}

// Swap two axes (copying).
template <typename S>
Tensor<S> transpose(const Tensor<S>& x, int axis_a, int axis_b) {
  int r = x.rank();
  if (axis_a < 0 || axis_b < 0 || axis_a >= r || axis_b >= r)
    throw std::invalid_argument("transpose: axis out of range");
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<size_t>(axis_a)], out_shape[static_cast<size_t>(axis_b)]);

  Shape in_shape = x.shape();
  auto strides = [](const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
      st[static_cast<size_t>(i)] = st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
    return st;
  };
  auto in_st = strides(in_shape);
  auto out_st = strides(out_shape);
  int64_t total = x.size();

  auto map_index = [r, axis_a, axis_b, in_shape = in_shape, in_st, out_st](int64_t flat_in) {
    int64_t rem = flat_in, flat_out = 0;
    for (int d = 0; d < r; ++d) {
      int64_t idx = rem / in_st[static_cast<size_t>(d)];
      rem %= in_st[static_cast<size_t>(d)];
      int od = d == axis_a ? axis_b : d == axis_b ? axis_a : d;
      flat_out += idx * out_st[static_cast<size_t>(od)];
    }
    return flat_out;
  };

  std::vector<S> out(static_cast<size_t>(total));
  const auto& xv = x.values();
  for (int64_t i = 0; i < total; ++i) out[static_cast<size_t>(map_index(i))] = xv[static_cast<size_t>(i)];
  return Tensor<S>::make_op(out_shape, std::move(out), {x}, [total, map_index](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < total; ++i)
      p.grad[static_cast<size_t>(i)] += n.grad[static_cast<size_t>(map_index(i))];
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<S> out(x.values());
  return Tensor<S>::make_op(std::move(shape), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  if (a.rank() != b.rank()) throw std::invalid_argument("concat: rank mismatch");
  int r = a.rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
  for (int d = 0; d < r; ++d)
    if (d != axis && a.dim(d) != b.dim(d))
      throw std::invalid_argument("concat: shapes differ off-axis " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] += b.dim(axis);

  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  int64_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= a.dim(d);
  int64_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;

  std::vector<S> out(static_cast<size_t>(shape_size(out_shape)));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.values().begin() + o * wa, wa, out.begin() + o * (wa + wb));
    std::copy_n(b.values().begin() + o * wb, wb, out.begin() + o * (wa + wb) + wa);
  }
  return Tensor<S>::make_op(out_shape, std::move(out), {a, b}, [outer, wa, wb](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const S* g = n.grad.data() + o * (wa + wb);
      if (pa.requires_grad)
        for (int64_t i = 0; i < wa; ++i) pa.grad[static_cast<size_t>(o * wa + i)] += g[i];
      if (pb.requires_grad)
        for (int64_t i = 0; i < wb; ++i) pb.grad[static_cast<size_t>(o * wb + i)] += g[wa + i];
    }
  });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int64_t start, int64_t len) {
  int r = x.rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("slice: axis out of range");
  if (start < 0 || len < 0 || start + len > x.dim(axis)) throw std::invalid_argument("slice: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  int64_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
  int64_t in_w = x.dim(axis) * inner, out_w = len * inner, off = start * inner;

  std::vector<S> out(static_cast<size_t>(shape_size(out_shape)));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.values().begin() + o * in_w + off, out_w, out.begin() + o * out_w);
  return Tensor<S>::make_op(out_shape, std::move(out), {x}, [outer, in_w, out_w, off](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < out_w; ++i)
        p.grad[static_cast<size_t>(o * in_w + off + i)] += n.grad[static_cast<size_t>(o * out_w + i)];
  });
}

// Row gather from a 2D tensor; repeated indices accumulate in the gradient.
// This is also the embedding lookup.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<int64_t> idx) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: need 2D input");
  int64_t n_rows = x.dim(0), d = x.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= n_rows) throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range [0," + std::to_string(n_rows) + ")");
  int64_t m = static_cast<int64_t>(idx.size());
  std::vector<S> out(static_cast<size_t>(m * d));
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(x.values().begin() + idx[static_cast<size_t>(i)] * d, d, out.begin() + i * d);
  return Tensor<S>::make_op({m, d}, std::move(out), {x}, [idx = std::move(idx), d](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        p.grad[static_cast<size_t>(idx[i] * d + j)] += n.grad[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
  });
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: need rank >= 1");
  int64_t d = x.dim(x.rank() - 1);
  if (d == 0) throw std::invalid_argument("softmax: empty last axis");
  int64_t rows = x.size() / d;
  std::vector<S> out(static_cast<size_t>(rows * d));
  const auto& xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * d;
    S* o = out.data() + r * d;
    S mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    S sum = S(0);
    for (int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    S inv = S(1) / sum;
    for (int64_t j = 0; j < d; ++j) o[j] *= inv;
  }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [rows, d](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* y = n.value.data() + r * d;
      const S* g = n.grad.data() + r * d;
      S dot = S(0);
      for (int64_t j = 0; j < d; ++j) dot += y[j] * g[j];
      S* pg = p.grad.data() + r * d;
      for (int64_t j = 0; j < d; ++j) pg[j] += y[j] * (g[j] - dot);
    }
  });
}

// softmax along an arbitrary axis, via transpose when not last.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: axis out of range");
  if (axis == r - 1) return softmax_lastdim(x);
  return transpose(softmax_lastdim(transpose(x, axis, r - 1)), axis, r - 1);
}

template <typename S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1) throw std::invalid_argument("log_softmax: need rank >= 1");
  int64_t d = x.dim(x.rank() - 1);
  if (d == 0) throw std::invalid_argument("log_softmax: empty last axis");
  int64_t rows = x.size() / d;
  std::vector<S> out(static_cast<size_t>(rows * d));
  const auto& xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * d;
    S* o = out.data() + r * d;
    S mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    S sum = S(0);
    for (int64_t j = 0; j < d; ++j) sum += std::exp(in[j] - mx);
    S lse = mx + std::log(sum);
    for (int64_t j = 0; j < d; ++j) o[j] = in[j] - lse;
  }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [rows, d](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* y = n.value.data() + r * d;
      const S* g = n.grad.data() + r * d;
      S gsum = S(0);
      for (int64_t j = 0; j < d; ++j) gsum += g[j];
      S* pg = p.grad.data() + r * d;
      for (int64_t j = 0; j < d; ++j) pg[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

// Per-position group normalization over the last axis: each length-d row is
// split into `groups` equal channel groups, normalized to zero mean and unit
// variance (biased), then scaled/shifted by gamma/beta.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int64_t groups, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  if (x.rank() < 1) throw std::invalid_argument("group_norm: need rank >= 1");
  int64_t d = x.dim(x.rank() - 1);
  if (groups < 1 || d % groups != 0)
    throw std::invalid_argument("group_norm: channel count " + std::to_string(d) + " not divisible by groups " + std::to_string(groups));
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
    throw std::invalid_argument("group_norm: gamma/beta must have length d");
  int64_t gs = d / groups;
  int64_t rows = d > 0 ? x.size() / d : 0;
  std::vector<S> out(static_cast<size_t>(x.size()));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < groups; ++g) {
      const S* in = xv.data() + r * d + g * gs;
      S* o = out.data() + r * d + g * gs;
      S mean = S(0);
      for (int64_t j = 0; j < gs; ++j) mean += in[j];
      mean /= static_cast<S>(gs);
      S var = S(0);
      for (int64_t j = 0; j < gs; ++j) {
        S t = in[j] - mean;
        var += t * t;
      }
      var /= static_cast<S>(gs);
      S rstd = S(1) / std::sqrt(var + eps);
      for (int64_t j = 0; j < gs; ++j) {
        S xhat = (in[j] - mean) * rstd;
        o[j] = xhat * gv[static_cast<size_t>(g * gs + j)] + bv[static_cast<size_t>(g * gs + j)];
      }
    }
  }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, gamma, beta}, [rows, d, groups, gs, eps](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    std::vector<S> xhat(static_cast<size_t>(gs));
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t g = 0; g < groups; ++g) {
        const S* in = px.value.data() + r * d + g * gs;
        const S* gr = n.grad.data() + r * d + g * gs;
        S mean = S(0);
        for (int64_t j = 0; j < gs; ++j) mean += in[j];
        mean /= static_cast<S>(gs);
        S var = S(0);
        for (int64_t j = 0; j < gs; ++j) {
          S t = in[j] - mean;
          var += t * t;
        }
        var /= static_cast<S>(gs);
        S rstd = S(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < gs; ++j) xhat[static_cast<size_t>(j)] = (in[j] - mean) * rstd;
        if (pg.requires_grad || pb.requires_grad) {
          for (int64_t j = 0; j < gs; ++j) {
            size_t c = static_cast<size_t>(g * gs + j);
            if (pg.requires_grad) pg.grad[c] += gr[j] * xhat[static_cast<size_t>(j)];
            if (pb.requires_grad) pb.grad[c] += gr[j];
          }
        }
        if (px.requires_grad) {
          // dx = rstd * (dy*gamma - mean(dy*gamma) - xhat * mean(dy*gamma*xhat))
          S m1 = S(0), m2 = S(0);
          for (int64_t j = 0; j < gs; ++j) {
            S dyg = gr[j] * pg.value[static_cast<size_t>(g * gs + j)];
            m1 += dyg;
            m2 += dyg * xhat[static_cast<size_t>(j)];
          }
          m1 /= static_cast<S>(gs);
          m2 /= static_cast<S>(gs);
          S* dx = px.grad.data() + r * d + g * gs;
          for (int64_t j = 0; j < gs; ++j) {
            S dyg = gr[j] * pg.value[static_cast<size_t>(g * gs + j)];
            dx[j] += rstd * (dyg - m1 - xhat[static_cast<size_t>(j)] * m2);
          }
        }
      }
    }
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  return group_norm(x, 1, gamma, beta, eps);
}

namespace detail {
// "SAME" padding split for one spatial axis: output extent ceil(in/stride).
inline std::pair<int64_t, int64_t> same_pad(int64_t in, int64_t k, int64_t stride) {
  int64_t out = (in + stride - 1) / stride;
  int64_t total = std::max<int64_t>(0, (out - 1) * stride + k - in);
  return {total / 2, out};
}
}  // namespace detail

// 2D convolution with same-padding. x: [B,T,F,Cin], w: [kh,kw,Cin,Cout],
// strides (st, sf) over (T, F). Output [B,ceil(T/st),ceil(F/sf),Cout].
template <typename S>
Tensor<S> conv2d_same(const Tensor<S>& x, const Tensor<S>& w, int64_t st, int64_t sf) {
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: x must be [B,T,F,Cin], w [kh,kw,Cin,Cout]");
  if (st < 1 || sf < 1) throw std::invalid_argument("conv2d: strides must be >= 1");
  int64_t B = x.dim(0), T = x.dim(1), F = x.dim(2), Cin = x.dim(3);
  int64_t kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
  if (w.dim(2) != Cin) throw std::invalid_argument("conv2d: kernel Cin mismatch");
  if (T == 0 || F == 0) throw std::invalid_argument("conv2d: kernel larger than padded input (empty spatial axis)");
  auto [pt, To] = detail::same_pad(T, kh, st);
  auto [pf, Fo] = detail::same_pad(F, kw, sf);

  std::vector<S> out(static_cast<size_t>(B * To * Fo * Cout), S(0));
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t to = 0; to < To; ++to)
      for (int64_t fo = 0; fo < Fo; ++fo) {
        S* o = out.data() + ((b * To + to) * Fo + fo) * Cout;
        for (int64_t i = 0; i < kh; ++i) {
          int64_t ti = to * st + i - pt;
          if (ti < 0 || ti >= T) continue;
          for (int64_t j = 0; j < kw; ++j) {
            int64_t fi = fo * sf + j - pf;
            if (fi < 0 || fi >= F) continue;
            const S* xin = xv.data() + ((b * T + ti) * F + fi) * Cin;
            const S* wk = wv.data() + (i * kw + j) * Cin * Cout;
            for (int64_t c = 0; c < Cin; ++c)
              for (int64_t co = 0; co < Cout; ++co) o[co] += xin[c] * wk[c * Cout + co];
          }
        }
      }
  return Tensor<S>::make_op({B, To, Fo, Cout}, std::move(out), {x, w},
                            [B, T, F, Cin, kh, kw, Cout, st, sf, pt = pt, pf = pf, To = To, Fo = Fo](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t to = 0; to < To; ++to)
        for (int64_t fo = 0; fo < Fo; ++fo) {
          const S* g = n.grad.data() + ((b * To + to) * Fo + fo) * Cout;
          for (int64_t i = 0; i < kh; ++i) {
            int64_t ti = to * st + i - pt;
            if (ti < 0 || ti >= T) continue;
            for (int64_t j = 0; j < kw; ++j) {
              int64_t fi = fo * sf + j - pf;
              if (fi < 0 || fi >= F) continue;
              const S* xin = px.value.data() + ((b * T + ti) * F + fi) * Cin;
              const S* wk = pw.value.data() + (i * kw + j) * Cin * Cout;
              for (int64_t c = 0; c < Cin; ++c)
                for (int64_t co = 0; co < Cout; ++co) {
                  if (px.requires_grad)
                    px.grad[static_cast<size_t>(((b * T + ti) * F + fi) * Cin + c)] += g[co] * wk[c * Cout + co];
                  if (pw.requires_grad)
                    pw.grad[static_cast<size_t>((i * kw + j) * Cin * Cout + c * Cout + co)] += g[co] * xin[c];
                }
            }
          }
        }
  });
}

// Depthwise 1D convolution along the time axis, same-padding, stride 1.
// x: [B,T,d], w: [k,d].
template <typename S>
Tensor<S> depthwise_conv1d_same(const Tensor<S>& x, const Tensor<S>& w) {
  if (x.rank() != 3 || w.rank() != 2) throw std::invalid_argument("depthwise_conv1d: x must be [B,T,d], w [k,d]");
  int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2), k = w.dim(0);
  if (w.dim(1) != d) throw std::invalid_argument("depthwise_conv1d: channel mismatch");
  int64_t pad = (k - 1) / 2;
  std::vector<S> out(static_cast<size_t>(B * T * d), S(0));
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t) {
      S* o = out.data() + (b * T + t) * d;
      for (int64_t i = 0; i < k; ++i) {
        int64_t ti = t + i - pad;
        if (ti < 0 || ti >= T) continue;
        const S* xin = xv.data() + (b * T + ti) * d;
        const S* wk = wv.data() + i * d;
        for (int64_t c = 0; c < d; ++c) o[c] += xin[c] * wk[c];
      }
    }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, w}, [B, T, d, k, pad](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < T; ++t) {
        const S* g = n.grad.data() + (b * T + t) * d;
        for (int64_t i = 0; i < k; ++i) {
          int64_t ti = t + i - pad;
          if (ti < 0 || ti >= T) continue;
          for (int64_t c = 0; c < d; ++c) {
            if (px.requires_grad)
              px.grad[static_cast<size_t>((b * T + ti) * d + c)] += g[c] * pw.value[static_cast<size_t>(i * d + c)];
            if (pw.requires_grad)
              pw.grad[static_cast<size_t>(i * d + c)] += g[c] * px.value[static_cast<size_t>((b * T + ti) * d + c)];
          }
        }
      }
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = S(1) / (S(1) + std::exp(-v));
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      S y = n.value[i];
      p.grad[i] += n.grad[i] * y * (S(1) - y);
    }
  });
}

template <typename S>
Tensor<S> swish(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) {
    S s = S(1) / (S(1) + std::exp(-v));
    v = v * s;
  }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      S x = p.value[i];
      S s = S(1) / (S(1) + std::exp(-x));
      p.grad[i] += n.grad[i] * (s + x * s * (S(1) - s));
    }
  });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2)));
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    const S inv_sqrt2pi = S(0.3989422804014327);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      S x = p.value[i];
      S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
      S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
      p.grad[i] += n.grad[i] * (cdf + x * pdf);
    }
  });
}

// Natural log; rejects non-positive inputs eagerly so NaN/Inf never enters
// the graph. Callers add an epsilon when the argument may touch zero.
template <typename S>
Tensor<S> log_t(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) {
    if (!(v > S(0))) throw std::domain_error("log: non-positive input");
    v = std::log(v);
  }
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
  });
}

template <typename S>
Tensor<S> exp_t(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = std::exp(v);
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
  });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S s = S(0);
  for (S v : x.values()) s += v;
  return Tensor<S>::make_op({1}, {s}, {x}, [](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0];
  });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  S inv = S(1) / static_cast<S>(x.size());
  S s = S(0);
  for (S v : x.values()) s += v;
  s *= inv;
  return Tensor<S>::make_op({1}, {s}, {x}, [inv](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0] * inv;
  });
}

// x: [n, m] -> column means [m].
template <typename S>
Tensor<S> mean_axis0(const Tensor<S>& x) {
  if (x.rank() != 2) throw std::invalid_argument("mean_axis0: need 2D input");
  int64_t n = x.dim(0), m = x.dim(1);
  if (n == 0) throw std::invalid_argument("mean_axis0: empty axis");
  std::vector<S> out(static_cast<size_t>(m), S(0));
  const auto& xv = x.values();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < m; ++j) out[static_cast<size_t>(j)] += xv[static_cast<size_t>(r * m + j)];
  S inv = S(1) / static_cast<S>(n);
  for (auto& v : out) v *= inv;
  return Tensor<S>::make_op({m}, std::move(out), {x}, [n, m, inv](Node<S>& node) {
    auto& p = *node.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t j = 0; j < m; ++j)
        p.grad[static_cast<size_t>(r * m + j)] += node.grad[static_cast<size_t>(j)] * inv;
  });
}

// x: [..., d] -> row sums [...] (last axis reduced).
template <typename S>
Tensor<S> sum_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1) throw std::invalid_argument("sum_lastdim: need rank >= 1");
  int64_t d = x.dim(x.rank() - 1);
  int64_t rows = d > 0 ? x.size() / d : 0;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<S> out(static_cast<size_t>(rows), S(0));
  const auto& xv = x.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r)] += xv[static_cast<size_t>(r * d + j)];
  return Tensor<S>::make_op(out_shape, std::move(out), {x}, [rows, d](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) p.grad[static_cast<size_t>(r * d + j)] += n.grad[static_cast<size_t>(r)];
  });
}

// Mean cross-entropy of integer targets against logits [n, V], computed with
// a stable log-sum-exp.
template <typename S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [n, V]");
  int64_t n = logits.dim(0), V = logits.dim(1);
  if (V < 2) throw std::invalid_argument("cross_entropy: need V >= 2");
  if (static_cast<int64_t>(targets.size()) != n) throw std::invalid_argument("cross_entropy: target count mismatch");
  if (n == 0) throw std::invalid_argument("cross_entropy: no rows (zero masked positions?)");
  for (int64_t t : targets)
    if (t < 0 || t >= V) throw std::out_of_range("cross_entropy: target id out of range");

  const auto& xv = logits.values();
  S total = S(0);
  for (int64_t r = 0; r < n; ++r) {
    const S* in = xv.data() + r * V;
    S mx = in[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, in[j]);
    S sum = S(0);
    for (int64_t j = 0; j < V; ++j) sum += std::exp(in[j] - mx);
    total += mx + std::log(sum) - in[targets[static_cast<size_t>(r)]];
  }
  total /= static_cast<S>(n);
  return Tensor<S>::make_op({1}, {total}, {logits}, [n, V, targets](Node<S>& node) {
    auto& p = *node.parents[0];
    p.ensure_grad();
    S gs = node.grad[0] / static_cast<S>(n);
    for (int64_t r = 0; r < n; ++r) {
      const S* in = p.value.data() + r * V;
      S mx = in[0];
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, in[j]);
      S sum = S(0);
      for (int64_t j = 0; j < V; ++j) sum += std::exp(in[j] - mx);
      S* pg = p.grad.data() + r * V;
      for (int64_t j = 0; j < V; ++j) pg[j] += gs * std::exp(in[j] - mx) / sum;
      pg[targets[static_cast<size_t>(r)]] -= gs;
    }
  });
}

// Row-wise cosine similarity of two [n, d] tensors -> [n]. A small epsilon
// inside the norms keeps the op defined at the origin.
template <typename S>
Tensor<S> cosine_similarity_rows(const Tensor<S>& a, const Tensor<S>& b, S eps = S(1e-12)) {
  detail::require_same_shape(a, b, "cosine_similarity");
  if (a.rank() != 2) throw std::invalid_argument("cosine_similarity: need 2D inputs");
  int64_t n = a.dim(0), d = a.dim(1);
  std::vector<S> out(static_cast<size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int64_t r = 0; r < n; ++r) {
    const S* x = av.data() + r * d;
    const S* y = bv.data() + r * d;
    S u = S(0), na = S(0), nb = S(0);
    for (int64_t j = 0; j < d; ++j) {
      u += x[j] * y[j];
      na += x[j] * x[j];
      nb += y[j] * y[j];
    }
    out[static_cast<size_t>(r)] = u / (std::sqrt(na + eps) * std::sqrt(nb + eps));
  }
  return Tensor<S>::make_op({n}, std::move(out), {a, b}, [n, d, eps](Node<S>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const S* x = pa.value.data() + r * d;
      const S* y = pb.value.data() + r * d;
      S u = S(0), na = S(0), nb = S(0);
      for (int64_t j = 0; j < d; ++j) {
        u += x[j] * y[j];
        na += x[j] * x[j];
        nb += y[j] * y[j];
      }
      S Pa = std::sqrt(na + eps), Pb = std::sqrt(nb + eps);
      S c = u / (Pa * Pb);
      S g = node.grad[static_cast<size_t>(r)];
      for (int64_t j = 0; j < d; ++j) {
        if (pa.requires_grad)
          pa.grad[static_cast<size_t>(r * d + j)] += g * (y[j] / (Pa * Pb) - c * x[j] / (Pa * Pa));
        if (pb.requires_grad)
          pb.grad[static_cast<size_t>(r * d + j)] += g * (x[j] / (Pa * Pb) - c * y[j] / (Pb * Pb));
      }
    }
  });
}

// Replace flagged elements with a constant. Gradient is zero at filled
// positions, pass-through elsewhere. `flags` has one byte per element.
template <typename S>
Tensor<S> masked_fill(const Tensor<S>& x, std::vector<uint8_t> flags, S value) {
  if (static_cast<int64_t>(flags.size()) != x.size())
    throw std::invalid_argument("masked_fill: flag count must equal element count");
  std::vector<S> out(x.values());
  for (size_t i = 0; i < out.size(); ++i)
    if (flags[i]) out[i] = value;
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [flags = std::move(flags)](Node<S>& n) {
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (!flags[i]) p.grad[i] += n.grad[i];
  });
}

// x: [B,T,d]; rows with flags[b*T+t] set are replaced by the vector m [d].
// Gradient flows to m summed over replaced rows and to x at kept rows.
template <typename S>
Tensor<S> replace_rows(const Tensor<S>& x, std::vector<uint8_t> flags, const Tensor<S>& m) {
  if (x.rank() != 3 || m.rank() != 1 || m.dim(0) != x.dim(2))
    throw std::invalid_argument("replace_rows: need x [B,T,d] and m [d]");
  int64_t rows = x.dim(0) * x.dim(1), d = x.dim(2);
  if (static_cast<int64_t>(flags.size()) != rows)
    throw std::invalid_argument("replace_rows: flag count must equal B*T");
  std::vector<S> out(x.values());
  const auto& mv = m.values();
  for (int64_t r = 0; r < rows; ++r)
    if (flags[static_cast<size_t>(r)])
      std::copy(mv.begin(), mv.end(), out.begin() + r * d);
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, m}, [flags = std::move(flags), rows, d](Node<S>& n) {
    auto& px = *n.parents[0];
    auto& pm = *n.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (pm.requires_grad) pm.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* g = n.grad.data() + r * d;
      if (flags[static_cast<size_t>(r)]) {
        if (pm.requires_grad)
          for (int64_t j = 0; j < d; ++j) pm.grad[static_cast<size_t>(j)] += g[j];
      } else if (px.requires_grad) {
        for (int64_t j = 0; j < d; ++j) px.grad[static_cast<size_t>(r * d + j)] += g[j];
      }
    }
  });
}

// Value copy with gradient flow cut.
template <typename S>
Tensor<S> detach(const Tensor<S>& x) {
  return Tensor<S>::from_vector(x.shape(), x.values());
}

// Non-graph helpers.
template <typename S>
std::vector<int64_t> argmax_lastdim(const Tensor<S>& x) {
  int64_t d = x.dim(x.rank() - 1);
  int64_t rows = d > 0 ? x.size() / d : 0;
  std::vector<int64_t> out(static_cast<size_t>(rows));
  const auto& xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * d;
    int64_t best = 0;
    for (int64_t j = 1; j < d; ++j)
      if (in[j] > in[best]) best = j;
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

}  // namespace slam
