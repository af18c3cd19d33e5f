#pragma once

// Reverse-mode autodiff on dense row-major tensors. Values are immutable once
// an op consumes them; backward() walks the recorded graph from a scalar loss
// and accumulates gradients into every reachable requires-grad leaf. Rank is
// 1 or 2 for every op here; that is all the models in this library need.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "difflm/blas.hpp"
#include "difflm/error.hpp"
#include "difflm/rng.hpp"

namespace difflm {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape &s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const Shape &s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode &)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<TensorNode<Real>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> v(static_cast<size_t>(shape_numel(shape)), Real(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, Real fill, bool requires_grad = false) {
    std::vector<Real> v(static_cast<size_t>(shape_numel(shape)), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  // Draws i.i.d. N(0, stddev^2) entries from the given stream. The result is
  // a constant: sampling is not differentiated through.
  static Tensor gaussian(Rng &rng, Shape shape, Real stddev = Real(1)) {
    auto v = rng.gaussian_vector<Real>(static_cast<size_t>(shape_numel(shape)));
    if (stddev != Real(1))
      for (auto &x : v) x *= stddev;
    return from(std::move(shape), std::move(v), false);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t rows() const { return node_->shape.at(0); }
  int64_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<Real> &values() const { return node_->value; }
  // In-place mutation is only legal on leaves between training steps (the
  // optimizer path); mutating an interior node would corrupt the tape.
  std::vector<Real> &values_mut() { return node_->value; }

  const std::vector<Real> &grad() const {
    if (node_->grad.size() != node_->value.size())
      const_cast<TensorNode<Real> *>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const { node_->grad.assign(node_->value.size(), Real(0)); }

  Real item() const {
    if (numel() != 1)
      throw ContractError("item: tensor " + shape_str(shape()) +
                          " is not a scalar");
    return node_->value[0];
  }

  // Backpropagates d(this)/d(leaf) into every requires-grad leaf reachable
  // from this scalar. Gradients accumulate across calls until zeroed.
  void backward() const {
    if (numel() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(shape()));
    if (!node_->requires_grad) return;

    // Post-order DFS (iterative; graphs can be deep), then replay reversed so
    // each node runs after everything that consumes it.
    std::vector<TensorNode<Real> *> order;
    std::unordered_set<TensorNode<Real> *> seen;
    std::vector<std::pair<TensorNode<Real> *, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto &[n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<Real> *p = n->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second)
          stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->ensure_grad();
    node_->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<Real> *n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  std::shared_ptr<TensorNode<Real>> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode<Real>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

namespace detail {

template <typename Real>
std::shared_ptr<TensorNode<Real>> make_node(
    Shape shape, std::vector<Real> value,
    std::vector<std::shared_ptr<TensorNode<Real>>> parents) {
  auto n = std::make_shared<TensorNode<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto &p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

template <typename Real>
void check_same_shape(const Tensor<Real> &a, const Tensor<Real> &b,
                      const char *op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Real>
void check_rank2(const Tensor<Real> &t, const char *op) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " +
                     shape_str(t.shape()));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real> &a, const Tensor<Real> &b) {
  detail::check_same_shape(a, b, "add");
  std::vector<Real> v(a.values());
  const auto &bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  auto n = detail::make_node<Real>(a.shape(), std::move(v),
                                   {a.node(), b.node()});
  if (n->requires_grad)
    n->backward_fn = [](TensorNode<Real> &self) {
      for (int k = 0; k < 2; ++k) {
        auto &p = *self.parents[k];
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
      }
    };
  return Tensor<Real>::wrap(n);
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real> &a, const Tensor<Real> &b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<Real> v(a.values());
  const auto &bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  auto n = detail::make_node<Real>(a.shape(), std::move(v),
                                   {a.node(), b.node()});
  if (n->requires_grad)
    n->backward_fn = [](TensorNode<Real> &self) {
      auto &pa = *self.parents[0];
      auto &pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb.grad[i] -= self.grad[i];
      }
    };
  return Tensor<Real>::wrap(n);
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real> &a, const Tensor<Real> &b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<Real> v(a.values());
  const auto &bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  auto n = detail::make_node<Real>(a.shape(), std::move(v),
                                   {a.node(), b.node()});
  if (n->requires_grad)
    n->backward_fn = [](TensorNode<Real> &self) {
      auto &pa = *self.parents[0];
      auto &pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb.grad[i] += self.grad[i] * pa.value[i];
      }
    };
  return Tensor<Real>::wrap(n);
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real> &x, Real c) {
  std::vector<Real> v(x.values());
  for (auto &e : v) e *= c;
  auto n = detail::make_node<Real>(x.shape(), std::move(v), {x.node()});
  if (n->requires_grad)
    n->backward_fn = [c](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        p.grad[i] += self.grad[i] * c;
    };
  return Tensor<Real>::wrap(n);
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real> &x, Real c) {
  std::vector<Real> v(x.values());
  for (auto &e : v) e += c;
  auto n = detail::make_node<Real>(x.shape(), std::move(v), {x.node()});
  if (n->requires_grad)
    n->backward_fn = [](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
  return Tensor<Real>::wrap(n);
}

namespace detail {

// Shared scaffolding for unary elementwise ops: dy/dx computed from (x, y).
template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary_op(const Tensor<Real> &x, Fwd fwd, Bwd bwd) {
  std::vector<Real> v(x.values());
  for (auto &e : v) e = fwd(e);
  auto n = detail::make_node<Real>(x.shape(), std::move(v), {x.node()});
  if (n->requires_grad)
    n->backward_fn = [bwd](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    };
  return Tensor<Real>::wrap(n);
}

}  // namespace detail

template <typename Real>
Tensor<Real> exp(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::exp(v); },
      [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::log(v); },
      [](Real v, Real) { return Real(1) / v; });
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::tanh(v); },
      [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real> &x) {
  // tanh approximation; the gradient below differentiates this exact form.
  constexpr Real kS = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real kC = Real(0.044715);
  return detail::unary_op(
      x,
      [](Real v) {
        return Real(0.5) * v * (Real(1) + std::tanh(kS * (v + kC * v * v * v)));
      },
      [](Real v, Real) {
        const Real u = kS * (v + kC * v * v * v);
        const Real t = std::tanh(u);
        const Real du = kS * (Real(1) + Real(3) * kC * v * v);
        return Real(0.5) * (Real(1) + t) +
               Real(0.5) * v * (Real(1) - t * t) * du;
      });
}

// Elementwise max(x, lo). Gradient passes where x > lo and is zero at or
// below the floor, so clamped entries stop receiving pressure.
template <typename Real>
Tensor<Real> clamp_min(const Tensor<Real> &x, Real lo) {
  return detail::unary_op(
      x, [lo](Real v) { return v > lo ? v : lo; },
      [lo](Real v, Real) { return v > lo ? Real(1) : Real(0); });
}

// ---- linear algebra ---------------------------------------------------------

// C = op(A) . op(B) with optional transposes, BLAS-backed.
template <typename Real>
Tensor<Real> matmul(const Tensor<Real> &a, const Tensor<Real> &b,
                    bool trans_a = false, bool trans_b = false) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  const int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const int64_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const int64_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_str(a.shape()) + (trans_a ? "^T" : "") + " vs " +
                     shape_str(b.shape()) + (trans_b ? "^T" : ""));

  std::vector<Real> v(static_cast<size_t>(m * n), Real(0));
  blas::gemm(trans_a, trans_b, m, n, ka, Real(1), a.values().data(),
             b.values().data(), Real(0), v.data());
  auto node = detail::make_node<Real>({m, n}, std::move(v),
                                      {a.node(), b.node()});
  if (node->requires_grad)
    node->backward_fn = [m, n, ka, trans_a, trans_b](TensorNode<Real> &self) {
      auto &pa = *self.parents[0];
      auto &pb = *self.parents[1];
      const Real *dc = self.grad.data();
      if (pa.requires_grad) {
        pa.ensure_grad();
        if (!trans_a && !trans_b)  // dA += dC.B^T
          blas::gemm(false, true, m, ka, n, Real(1), dc, pb.value.data(),
                     Real(1), pa.grad.data());
        else if (!trans_a && trans_b)  // dA += dC.B
          blas::gemm(false, false, m, ka, n, Real(1), dc, pb.value.data(),
                     Real(1), pa.grad.data());
        else if (trans_a && !trans_b)  // dA += B.dC^T
          blas::gemm(false, true, ka, m, n, Real(1), pb.value.data(), dc,
                     Real(1), pa.grad.data());
        else  // dA += B^T.dC^T
          blas::gemm(true, true, ka, m, n, Real(1), pb.value.data(), dc,
                     Real(1), pa.grad.data());
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        if (!trans_a && !trans_b)  // dB += A^T.dC
          blas::gemm(true, false, ka, n, m, Real(1), pa.value.data(), dc,
                     Real(1), pb.grad.data());
        else if (!trans_a && trans_b)  // dB += dC^T.A
          blas::gemm(true, false, n, ka, m, Real(1), dc, pa.value.data(),
                     Real(1), pb.grad.data());
        else if (trans_a && !trans_b)  // dB += A.dC
          blas::gemm(false, false, ka, n, m, Real(1), pa.value.data(), dc,
                     Real(1), pb.grad.data());
        else  // dB += dC^T.A^T
          blas::gemm(true, true, n, ka, m, Real(1), dc, pa.value.data(),
                     Real(1), pb.grad.data());
      }
    };
  return Tensor<Real>::wrap(node);
}

// x: (N,D), bias: (D) or (1,D); adds bias to every row.
template <typename Real>
Tensor<Real> add_rowwise(const Tensor<Real> &x, const Tensor<Real> &bias) {
  detail::check_rank2(x, "add_rowwise");
  const int64_t nrows = x.shape()[0], d = x.shape()[1];
  if (bias.numel() != d)
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) +
                     " does not match row width " + std::to_string(d));
  std::vector<Real> v(x.values());
  const auto &bv = bias.values();
  for (int64_t r = 0; r < nrows; ++r)
    for (int64_t c = 0; c < d; ++c) v[r * d + c] += bv[c];
  auto n = detail::make_node<Real>(x.shape(), std::move(v),
                                   {x.node(), bias.node()});
  if (n->requires_grad)
    n->backward_fn = [nrows, d](TensorNode<Real> &self) {
      auto &px = *self.parents[0];
      auto &pb = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          px.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int64_t r = 0; r < nrows; ++r)
          for (int64_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
      }
    };
  return Tensor<Real>::wrap(n);
}

// ---- softmax / losses -------------------------------------------------------

// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real> &x, int axis) {
  const auto &shp = x.shape();
  int64_t groups, len, gstride, estride;
  if (shp.size() == 1) {
    if (axis != 0) throw ShapeError("softmax: rank-1 tensor requires axis 0");
    groups = 1, len = shp[0], gstride = 0, estride = 1;
  } else if (shp.size() == 2) {
    if (axis == 1) {
      groups = shp[0], len = shp[1], gstride = shp[1], estride = 1;
    } else if (axis == 0) {
      groups = shp[1], len = shp[0], gstride = 1, estride = shp[1];
    } else {
      throw ShapeError("softmax: axis out of range for " + shape_str(shp));
    }
  } else {
    throw ShapeError("softmax: expected rank 1 or 2, got " + shape_str(shp));
  }

  std::vector<Real> v(x.values());
  for (int64_t g = 0; g < groups; ++g) {
    Real *p = v.data() + g * gstride;
    Real mx = p[0];
    for (int64_t i = 1; i < len; ++i) mx = std::max(mx, p[i * estride]);
    Real sum = Real(0);
    for (int64_t i = 0; i < len; ++i) {
      Real e = std::exp(p[i * estride] - mx);
      p[i * estride] = e;
      sum += e;
    }
    const Real inv = Real(1) / sum;
    for (int64_t i = 0; i < len; ++i) p[i * estride] *= inv;
  }
  auto n = detail::make_node<Real>(shp, std::move(v), {x.node()});
  if (n->requires_grad)
    n->backward_fn = [groups, len, gstride, estride](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (int64_t g = 0; g < groups; ++g) {
        const Real *y = self.value.data() + g * gstride;
        const Real *dy = self.grad.data() + g * gstride;
        Real dot = Real(0);
        for (int64_t i = 0; i < len; ++i)
          dot += dy[i * estride] * y[i * estride];
        Real *dx = p.grad.data() + g * gstride;
        for (int64_t i = 0; i < len; ++i)
          dx[i * estride] += y[i * estride] * (dy[i * estride] - dot);
      }
    };
  return Tensor<Real>::wrap(n);
}

// Per-row cross entropy from raw logits (N,V) against integer targets (N).
// Stable log-sum-exp; returns losses in nats, shape (N).
template <typename Real>
Tensor<Real> cross_entropy_logits(const Tensor<Real> &logits,
                                  const std::vector<int32_t> &targets) {
  detail::check_rank2(logits, "cross_entropy_logits");
  const int64_t n = logits.shape()[0], vocab = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != n)
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  std::vector<Real> lse(static_cast<size_t>(n));
  std::vector<Real> loss(static_cast<size_t>(n));
  const Real *lv = logits.values().data();
  for (int64_t r = 0; r < n; ++r) {
    const int32_t t = targets[r];
    if (t < 0 || t >= vocab)
      throw ContractError("cross_entropy_logits: target " + std::to_string(t) +
                          " outside vocab " + std::to_string(vocab));
    const Real *row = lv + r * vocab;
    Real mx = row[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    Real s = Real(0);
    for (int64_t c = 0; c < vocab; ++c) s += std::exp(row[c] - mx);
    lse[r] = mx + std::log(s);
    loss[r] = lse[r] - row[t];
  }
  auto node = detail::make_node<Real>({n}, std::move(loss), {logits.node()});
  if (node->requires_grad)
    node->backward_fn = [targets, lse = std::move(lse), vocab](
                            TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      const int64_t n = self.numel();
      for (int64_t r = 0; r < n; ++r) {
        const Real g = self.grad[r];
        if (g == Real(0)) continue;
        const Real *row = p.value.data() + r * vocab;
        Real *drow = p.grad.data() + r * vocab;
        for (int64_t c = 0; c < vocab; ++c)
          drow[c] += g * std::exp(row[c] - lse[r]);
        drow[targets[r]] -= g;
      }
    };
  return Tensor<Real>::wrap(node);
}

// ---- structure ops ----------------------------------------------------------

// Gathers rows of `table` (V,D) by index; scatter-adds gradients back.
template <typename Real>
Tensor<Real> embedding_rows(const Tensor<Real> &table,
                            const std::vector<int32_t> &ids) {
  detail::check_rank2(table, "embedding_rows");
  const int64_t vocab = table.shape()[0], d = table.shape()[1];
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<Real> v(static_cast<size_t>(n * d));
  for (int64_t r = 0; r < n; ++r) {
    if (ids[r] < 0 || ids[r] >= vocab)
      throw ContractError("embedding_rows: id " + std::to_string(ids[r]) +
                          " outside table " + std::to_string(vocab));
    std::copy_n(table.values().data() + ids[r] * d, d, v.data() + r * d);
  }
  auto node = detail::make_node<Real>({n, d}, std::move(v), {table.node()});
  if (node->requires_grad)
    node->backward_fn = [ids, d](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t r = 0; r < ids.size(); ++r) {
        const Real *g = self.grad.data() + r * d;
        Real *dst = p.grad.data() + ids[r] * d;
        for (int64_t c = 0; c < d; ++c) dst[c] += g[c];
      }
    };
  return Tensor<Real>::wrap(node);
}

// Row-wise layer norm with affine parameters gamma, beta of width D.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real> &x, const Tensor<Real> &gamma,
                        const Tensor<Real> &beta, Real eps = Real(1e-5)) {
  detail::check_rank2(x, "layer_norm");
  const int64_t n = x.shape()[0], d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: affine params must have width " +
                     std::to_string(d));
  std::vector<Real> v(static_cast<size_t>(n * d));
  std::vector<Real> xhat(static_cast<size_t>(n * d));
  std::vector<Real> inv_std(static_cast<size_t>(n));
  const Real *xv = x.values().data();
  const Real *gv = gamma.values().data();
  const Real *bv = beta.values().data();
  for (int64_t r = 0; r < n; ++r) {
    const Real *row = xv + r * d;
    Real mean = Real(0);
    for (int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= Real(d);
    Real var = Real(0);
    for (int64_t c = 0; c < d; ++c) {
      const Real dv = row[c] - mean;
      var += dv * dv;
    }
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int64_t c = 0; c < d; ++c) {
      const Real h = (row[c] - mean) * inv;
      xhat[r * d + c] = h;
      v[r * d + c] = h * gv[c] + bv[c];
    }
  }
  auto node = detail::make_node<Real>(
      x.shape(), std::move(v), {x.node(), gamma.node(), beta.node()});
  if (node->requires_grad)
    node->backward_fn = [n, d, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](TensorNode<Real> &self) {
      auto &px = *self.parents[0];
      auto &pg = *self.parents[1];
      auto &pb = *self.parents[2];
      const Real *gv = pg.value.data();
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      if (px.requires_grad) px.ensure_grad();
      for (int64_t r = 0; r < n; ++r) {
        const Real *dy = self.grad.data() + r * d;
        const Real *xh = xhat.data() + r * d;
        if (pg.requires_grad)
          for (int64_t c = 0; c < d; ++c) pg.grad[c] += dy[c] * xh[c];
        if (pb.requires_grad)
          for (int64_t c = 0; c < d; ++c) pb.grad[c] += dy[c];
        if (px.requires_grad) {
          Real sum_dh = Real(0), sum_dh_h = Real(0);
          for (int64_t c = 0; c < d; ++c) {
            const Real dh = dy[c] * gv[c];
            sum_dh += dh;
            sum_dh_h += dh * xh[c];
          }
          const Real inv = inv_std[r];
          Real *dx = px.grad.data() + r * d;
          for (int64_t c = 0; c < d; ++c) {
            const Real dh = dy[c] * gv[c];
            dx[c] += inv * (dh - sum_dh / Real(d) - xh[c] * sum_dh_h / Real(d));
          }
        }
      }
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>> &parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int64_t d = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
  int64_t total = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto &p : parts) {
    detail::check_rank2(p, "concat_rows");
    if (p.shape()[1] != d)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    total += p.shape()[0];
    parents.push_back(p.node());
  }
  std::vector<Real> v;
  v.reserve(static_cast<size_t>(total * d));
  for (const auto &p : parts)
    v.insert(v.end(), p.values().begin(), p.values().end());
  auto node = detail::make_node<Real>({total, d}, std::move(v),
                                      std::move(parents));
  if (node->requires_grad)
    node->backward_fn = [d](TensorNode<Real> &self) {
      int64_t off = 0;
      for (auto &pp : self.parents) {
        auto &p = *pp;
        const int64_t cnt = p.numel();
        if (p.requires_grad) {
          p.ensure_grad();
          for (int64_t i = 0; i < cnt; ++i) p.grad[i] += self.grad[off + i];
        }
        off += cnt;
      }
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>> &parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t n = parts[0].shape().size() == 2 ? parts[0].shape()[0] : -1;
  int64_t total = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  std::vector<int64_t> widths;
  for (const auto &p : parts) {
    detail::check_rank2(p, "concat_cols");
    if (p.shape()[0] != n)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
    parents.push_back(p.node());
  }
  std::vector<Real> v(static_cast<size_t>(n * total));
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Real *src = parts[k].values().data();
    for (int64_t r = 0; r < n; ++r)
      std::copy_n(src + r * widths[k], widths[k], v.data() + r * total + off);
    off += widths[k];
  }
  auto node = detail::make_node<Real>({n, total}, std::move(v),
                                      std::move(parents));
  if (node->requires_grad)
    node->backward_fn = [n, total, widths](TensorNode<Real> &self) {
      int64_t off = 0;
      for (size_t k = 0; k < self.parents.size(); ++k) {
        auto &p = *self.parents[k];
        if (p.requires_grad) {
          p.ensure_grad();
          for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < widths[k]; ++c)
              p.grad[r * widths[k] + c] += self.grad[r * total + off + c];
        }
        off += widths[k];
      }
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real> &x, int64_t r0, int64_t r1) {
  detail::check_rank2(x, "slice_rows");
  const int64_t n = x.shape()[0], d = x.shape()[1];
  if (r0 < 0 || r1 > n || r0 >= r1)
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") invalid for " +
                     shape_str(x.shape()));
  std::vector<Real> v(x.values().begin() + r0 * d, x.values().begin() + r1 * d);
  auto node = detail::make_node<Real>({r1 - r0, d}, std::move(v), {x.node()});
  if (node->requires_grad)
    node->backward_fn = [r0, d](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        p.grad[r0 * d + i] += self.grad[i];
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real> &x, int64_t c0, int64_t c1) {
  detail::check_rank2(x, "slice_cols");
  const int64_t n = x.shape()[0], d = x.shape()[1];
  if (c0 < 0 || c1 > d || c0 >= c1)
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") invalid for " +
                     shape_str(x.shape()));
  const int64_t w = c1 - c0;
  std::vector<Real> v(static_cast<size_t>(n * w));
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(x.values().data() + r * d + c0, w, v.data() + r * w);
  auto node = detail::make_node<Real>({n, w}, std::move(v), {x.node()});
  if (node->requires_grad)
    node->backward_fn = [n, d, c0, w](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < w; ++c)
          p.grad[r * d + c0 + c] += self.grad[r * w + c];
    };
  return Tensor<Real>::wrap(node);
}

// ---- reductions / reshaping -------------------------------------------------

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real> &x) {
  Real s = Real(0);
  for (Real v : x.values()) s += v;
  auto node = detail::make_node<Real>({1}, {s}, {x.node()});
  if (node->requires_grad)
    node->backward_fn = [](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      const Real g = self.grad[0];
      for (auto &e : p.grad) e += g;
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real> &x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), Real(1) / static_cast<Real>(x.numel()));
}

// axis 0: column sums (1,D); axis 1: row sums (N,1).
template <typename Real>
Tensor<Real> sum_axis(const Tensor<Real> &x, int axis) {
  detail::check_rank2(x, "sum_axis");
  const int64_t n = x.shape()[0], d = x.shape()[1];
  if (axis != 0 && axis != 1)
    throw ShapeError("sum_axis: axis must be 0 or 1");
  Shape out_shape = axis == 0 ? Shape{1, d} : Shape{n, 1};
  std::vector<Real> v(static_cast<size_t>(shape_numel(out_shape)), Real(0));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c)
      v[axis == 0 ? c : r] += x.values()[r * d + c];
  auto node = detail::make_node<Real>(out_shape, std::move(v), {x.node()});
  if (node->requires_grad)
    node->backward_fn = [n, d, axis](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c)
          p.grad[r * d + c] += self.grad[axis == 0 ? c : r];
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real> &x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  auto node = detail::make_node<Real>(std::move(shape),
                                      std::vector<Real>(x.values()),
                                      {x.node()});
  if (node->requires_grad)
    node->backward_fn = [](TensorNode<Real> &self) {
      auto &p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
  return Tensor<Real>::wrap(node);
}

template <typename Real>
bool all_finite(const Tensor<Real> &x) {
  for (Real v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace difflm
