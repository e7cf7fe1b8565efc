#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dfast/error.hpp"
#include "dfast/rng.hpp"
#include "dfast/tensor.hpp"

namespace dfast {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const EMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> on{true};
  return on;
}

// Raises NumericError if the tensor holds NaN/Inf. A single vectorized
// double-precision reduction: any non-finite element poisons the sum.
template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_flag().load(std::memory_order_relaxed)) return;
  if (t.data.empty()) return;
  CArrMap<T> a(t.data.data(), t.numel());
  const double s = a.template cast<double>().sum();
  if (!std::isfinite(s)) throw NumericError(std::string(op) + " produced a non-finite value");
}

namespace detail {

inline uint64_t next_seq() {
  static std::atomic<uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backprop;
};

template <typename T>
Tensor<T>& grad_buf(Node<T>& n) {
  if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
  return n.grad;
}

}  // namespace detail

// Handle to a node of the computation record. Copying a Var aliases the
// same node; the record is the DAG reachable through node inputs, ordered
// by creation sequence (inputs always precede their consumers).
template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const {
    if (!has_grad()) throw ContractError("gradient not computed for this tensor");
    return node_->grad;
  }
  Tensor<T>& grad_mut() { return detail::grad_buf(*node_); }
  void zero_grad() {
    if (node_ && !node_->grad.empty())
      std::fill(node_->grad.data.begin(), node_->grad.data.end(), T(0));
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }
  explicit Var(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

// Creates the output node of an op. Inputs and the backward rule are only
// retained when some input tracks gradients, so constant subgraphs are freed
// as soon as the caller drops them.
template <typename T>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> ins,
               std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->seq = next_seq();
  bool rg = false;
  for (const auto& v : ins) rg = rg || v.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->inputs.reserve(ins.size());
    for (const auto& v : ins) n->inputs.push_back(v.node());
    n->backprop = std::move(backprop);
  }
  return Var<T>(n);
}

template <typename T>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& ins,
               std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->seq = next_seq();
  bool rg = false;
  for (const auto& v : ins) rg = rg || v.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->inputs.reserve(ins.size());
    for (const auto& v : ins) n->inputs.push_back(v.node());
    n->backprop = std::move(backprop);
  }
  return Var<T>(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(x) into the grad of every reachable tensor that
// requires gradients. The traversal visits each node exactly once, in
// reverse topological (creation) order.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.value().numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("(undefined)")));
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<NodeT*> stack{loss.node().get()};
  while (!stack.empty()) {
    NodeT* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen.count(n)) continue;
    seen.insert(n);
    order.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const NodeT* a, const NodeT* b) { return a->seq < b->seq; });
  if (loss.requires_grad()) detail::grad_buf(*loss.node())[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

// add with trailing-shape broadcasting: shapes must be equal, or the smaller
// operand's shape must be a suffix of the larger's (bias rows, positional
// grids). Gradient of the broadcast side sums over the leading axes.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const bool a_big = a.value().numel() >= b.value().numel();
  const Tensor<T>& big = a_big ? a.value() : b.value();
  const Tensor<T>& small = a_big ? b.value() : a.value();
  const auto& bs = small.shape;
  const auto& gs = big.shape;
  if (bs.size() > gs.size() || !std::equal(bs.rbegin(), bs.rend(), gs.rbegin()))
    throw DimensionError("add: shape " + shape_str(b.shape()) + " does not broadcast onto " +
                         shape_str(a.shape()));
  const int64_t bn = small.numel();
  const int64_t reps = big.numel() / bn;
  Tensor<T> out;
  out.shape = gs;
  out.data.resize(size_t(big.numel()));
  {
    CMatMap<T> bigm(big.data.data(), reps, bn);
    CArrMap<T> smallv(small.data.data(), bn);
    MatMap<T> om(out.data.data(), reps, bn);
    om = bigm.array().rowwise() + smallv.transpose().array();
  }
  return detail::make_op<T>(std::move(out), {a, b}, [a_big, reps, bn](detail::Node<T>& self) {
    auto& ga_node = *self.inputs[a_big ? 0 : 1];
    auto& gb_node = *self.inputs[a_big ? 1 : 0];
    if (ga_node.requires_grad) {
      auto& g = detail::grad_buf(ga_node);
      ArrMap<T>(g.data.data(), g.numel()) += CArrMap<T>(self.grad.data.data(), self.grad.numel());
    }
    if (gb_node.requires_grad) {
      auto& g = detail::grad_buf(gb_node);
      CMatMap<T> gm(self.grad.data.data(), reps, bn);
      MatMap<T> gbm(g.data.data(), 1, bn);
      gbm.array() += gm.colwise().sum().array();
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(a.value().data.size());
  ArrMap<T>(out.data.data(), out.numel()) =
      CArrMap<T>(a.value().data.data(), out.numel()) *
      CArrMap<T>(b.value().data.data(), out.numel());
  return detail::make_op<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
    const int64_t n = self.grad.numel();
    CArrMap<T> g(self.grad.data.data(), n);
    auto &an = *self.inputs[0], &bn = *self.inputs[1];
    if (an.requires_grad)
      ArrMap<T>(detail::grad_buf(an).data.data(), n) += g * CArrMap<T>(bn.value.data.data(), n);
    if (bn.requires_grad)
      ArrMap<T>(detail::grad_buf(bn).data.data(), n) += g * CArrMap<T>(an.value.data.data(), n);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(a.value().data.size());
  ArrMap<T>(out.data.data(), out.numel()) = CArrMap<T>(a.value().data.data(), out.numel()) * c;
  return detail::make_op<T>(std::move(out), {a}, [c](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (an.requires_grad)
      ArrMap<T>(detail::grad_buf(an).data.data(), self.grad.numel()) +=
          CArrMap<T>(self.grad.data.data(), self.grad.numel()) * c;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape target) {
  if (numel_of(target) != a.value().numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(target));
  Tensor<T> out;
  out.shape = std::move(target);
  out.data = a.value().data;
  Shape orig = a.shape();
  return detail::make_op<T>(std::move(out), {a}, [orig](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    ArrMap<T>(g.data.data(), g.numel()) += CArrMap<T>(self.grad.data.data(), self.grad.numel());
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  if (a.value().rank() != 2) throw DimensionError("transpose expects rank 2, got " +
                                                  shape_str(a.shape()));
  const int64_t m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> out({n, m});
  MatMap<T>(out.data.data(), n, m) = CMatMap<T>(a.value().data.data(), m, n).transpose();
  return detail::make_op<T>(std::move(out), {a}, [m, n](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    MatMap<T>(g.data.data(), m, n) += CMatMap<T>(self.grad.data.data(), n, m).transpose();
  });
}

// rank-3 axis permutation
template <typename T>
Var<T> permute(const Var<T>& a, std::array<int, 3> p) {
  if (a.value().rank() != 3)
    throw DimensionError("permute expects rank 3, got " + shape_str(a.shape()));
  const Shape& s = a.shape();
  Tensor<T> out({s[size_t(p[0])], s[size_t(p[1])], s[size_t(p[2])]});
  const int64_t d0 = s[0], d1 = s[1], d2 = s[2];
  std::array<int64_t, 3> ostr{};  // stride of source axis i in the output
  {
    std::array<int64_t, 3> odims{out.shape[0], out.shape[1], out.shape[2]};
    std::array<int64_t, 3> ostrides{odims[1] * odims[2], odims[2], 1};
    for (int i = 0; i < 3; ++i) ostr[size_t(p[size_t(i)])] = ostrides[size_t(i)];
  }
  const T* src = a.value().data.data();
  T* dst = out.data.data();
  for (int64_t i = 0; i < d0; ++i)
    for (int64_t j = 0; j < d1; ++j)
      for (int64_t k = 0; k < d2; ++k)
        dst[i * ostr[0] + j * ostr[1] + k * ostr[2]] = src[(i * d1 + j) * d2 + k];
  return detail::make_op<T>(std::move(out), {a}, [d0, d1, d2, ostr](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    const T* gsrc = self.grad.data.data();
    T* gdst = g.data.data();
    for (int64_t i = 0; i < d0; ++i)
      for (int64_t j = 0; j < d1; ++j)
        for (int64_t k = 0; k < d2; ++k)
          gdst[(i * d1 + j) * d2 + k] += gsrc[i * ostr[0] + j * ostr[1] + k * ostr[2]];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const int64_t n = a.value().numel();
  T m = T(CArrMap<T>(a.value().data.data(), n).template cast<double>().sum() / double(n));
  Tensor<T> out = Tensor<T>::scalar(m);
  return detail::make_op<T>(std::move(out), {a}, [n](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    ArrMap<T>(g.data.data(), n) += self.grad[0] / T(n);
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  const int64_t n = a.value().numel();
  T m = T(CArrMap<T>(a.value().data.data(), n).template cast<double>().sum());
  Tensor<T> out = Tensor<T>::scalar(m);
  return detail::make_op<T>(std::move(out), {a}, [n](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    ArrMap<T>(g.data.data(), n) += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// matmul supports (m,k)@(k,n), (B,m,k)@(k,n) with a shared right factor, and
// (B,m,k)@(B,k,n) batched.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  const int ra = A.rank(), rb = B.rank();
  auto bad = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " @ " +
                          shape_str(B.shape));
  };
  Tensor<T> out;
  if (ra == 2 && rb == 2) {
    if (A.dim(1) != B.dim(0)) throw bad();
    out = Tensor<T>({A.dim(0), B.dim(1)});
    MatMap<T>(out.data.data(), A.dim(0), B.dim(1)).noalias() =
        CMatMap<T>(A.data.data(), A.dim(0), A.dim(1)) *
        CMatMap<T>(B.data.data(), B.dim(0), B.dim(1));
  } else if (ra == 3 && rb == 2) {
    if (A.dim(2) != B.dim(0)) throw bad();
    out = Tensor<T>({A.dim(0), A.dim(1), B.dim(1)});
    const int64_t rows = A.dim(0) * A.dim(1);
    MatMap<T>(out.data.data(), rows, B.dim(1)).noalias() =
        CMatMap<T>(A.data.data(), rows, A.dim(2)) *
        CMatMap<T>(B.data.data(), B.dim(0), B.dim(1));
  } else if (ra == 3 && rb == 3) {
    if (A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1)) throw bad();
    out = Tensor<T>({A.dim(0), A.dim(1), B.dim(2)});
    const int64_t m = A.dim(1), k = A.dim(2), n = B.dim(2);
    for (int64_t i = 0; i < A.dim(0); ++i)
      MatMap<T>(out.data.data() + i * m * n, m, n).noalias() =
          CMatMap<T>(A.data.data() + i * m * k, m, k) *
          CMatMap<T>(B.data.data() + i * k * n, k, n);
  } else {
    throw bad();
  }
  check_finite(out, "matmul");
  return detail::make_op<T>(std::move(out), {a, b}, [ra, rb](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    const Tensor<T>& A = an.value;
    const Tensor<T>& B = bn.value;
    const Tensor<T>& G = self.grad;
    if (ra == 2 && rb == 2) {
      const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
      if (an.requires_grad)
        MatMap<T>(detail::grad_buf(an).data.data(), m, k).noalias() +=
            CMatMap<T>(G.data.data(), m, n) * CMatMap<T>(B.data.data(), k, n).transpose();
      if (bn.requires_grad)
        MatMap<T>(detail::grad_buf(bn).data.data(), k, n).noalias() +=
            CMatMap<T>(A.data.data(), m, k).transpose() * CMatMap<T>(G.data.data(), m, n);
    } else if (ra == 3 && rb == 2) {
      const int64_t rows = A.dim(0) * A.dim(1), k = A.dim(2), n = B.dim(1);
      if (an.requires_grad)
        MatMap<T>(detail::grad_buf(an).data.data(), rows, k).noalias() +=
            CMatMap<T>(G.data.data(), rows, n) * CMatMap<T>(B.data.data(), k, n).transpose();
      if (bn.requires_grad)
        MatMap<T>(detail::grad_buf(bn).data.data(), k, n).noalias() +=
            CMatMap<T>(A.data.data(), rows, k).transpose() * CMatMap<T>(G.data.data(), rows, n);
    } else {
      const int64_t bsz = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(2);
      for (int64_t i = 0; i < bsz; ++i) {
        if (an.requires_grad)
          MatMap<T>(detail::grad_buf(an).data.data() + i * m * k, m, k).noalias() +=
              CMatMap<T>(G.data.data() + i * m * n, m, n) *
              CMatMap<T>(B.data.data() + i * k * n, k, n).transpose();
        if (bn.requires_grad)
          MatMap<T>(detail::grad_buf(bn).data.data() + i * k * n, k, n).noalias() +=
              CMatMap<T>(A.data.data() + i * m * k, m, k).transpose() *
              CMatMap<T>(G.data.data() + i * m * n, m, n);
      }
    }
  });
}

// y = x @ w^T + b with w stored (out_features, in_features), b optional.
// x may be rank 2 or 3; leading axes are folded for the product.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>{}) {
  const Tensor<T>& X = x.value();
  const Tensor<T>& W = w.value();
  if (W.rank() != 2 || X.rank() < 2 || X.last_dim() != W.dim(1))
    throw DimensionError("linear: input " + shape_str(X.shape) + " vs weight " +
                         shape_str(W.shape));
  const bool has_bias = b.defined();
  if (has_bias && (b.value().rank() != 1 || b.value().dim(0) != W.dim(0)))
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs weight " +
                         shape_str(W.shape));
  const int64_t rows = X.lead(), in = W.dim(1), outf = W.dim(0);
  Shape oshape = X.shape;
  oshape.back() = outf;
  Tensor<T> out(oshape);
  {
    MatMap<T> om(out.data.data(), rows, outf);
    om.noalias() = CMatMap<T>(X.data.data(), rows, in) *
                   CMatMap<T>(W.data.data(), outf, in).transpose();
    if (has_bias)
      om.array().rowwise() += CArrMap<T>(b.value().data.data(), outf).transpose().array();
  }
  check_finite(out, "linear");
  auto bp = [rows, in, outf, has_bias](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    CMatMap<T> g(self.grad.data.data(), rows, outf);
    if (xn.requires_grad)
      MatMap<T>(detail::grad_buf(xn).data.data(), rows, in).noalias() +=
          g * CMatMap<T>(wn.value.data.data(), outf, in);
    if (wn.requires_grad)
      MatMap<T>(detail::grad_buf(wn).data.data(), outf, in).noalias() +=
          g.transpose() * CMatMap<T>(xn.value.data.data(), rows, in);
    if (has_bias) {
      auto& bn2 = *self.inputs[2];
      if (bn2.requires_grad) {
        MatMap<T> gb(detail::grad_buf(bn2).data.data(), 1, outf);
        gb.array() += g.colwise().sum().array();
      }
    }
  };
  if (has_bias) return detail::make_op<T>(std::move(out), {x, w, b}, bp);
  return detail::make_op<T>(std::move(out), {x, w}, bp);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Softmax along the last axis. Rows are shifted by their max before
// exponentiation; outputs are nonnegative and sum to one per row.
template <typename T>
Var<T> softmax(const Var<T>& a) {
  const int64_t rows = a.value().lead(), d = a.value().last_dim();
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(size_t(rows * d));
  for (int64_t r = 0; r < rows; ++r) {
    CArrMap<T> x(a.value().data.data() + r * d, d);
    ArrMap<T> y(out.data.data() + r * d, d);
    y = (x - x.maxCoeff()).exp();
    y /= y.sum();
  }
  return detail::make_op<T>(std::move(out), {a}, [rows, d](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& gx = detail::grad_buf(an);
    for (int64_t r = 0; r < rows; ++r) {
      CArrMap<T> s(self.value.data.data() + r * d, d);
      CArrMap<T> g(self.grad.data.data() + r * d, d);
      const T dot = (g * s).sum();
      ArrMap<T>(gx.data.data() + r * d, d) += s * (g - dot);
    }
  });
}

// Layer normalization along the last axis with learnable per-feature scale
// and shift. Uses the biased variance.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5)) {
  const int64_t rows = x.value().lead(), d = x.value().last_dim();
  if (gain.value().numel() != d || shift.value().numel() != d)
    throw DimensionError("layer_norm: scale/shift length must equal last dim " +
                         std::to_string(d));
  Tensor<T> out;
  out.shape = x.shape();
  out.data.resize(size_t(rows * d));
  Tensor<T> xhat;
  xhat.shape = x.shape();
  xhat.data.resize(size_t(rows * d));
  std::vector<T> inv_std(static_cast<size_t>(rows), T(0));
  CArrMap<T> gm(gain.value().data.data(), d);
  CArrMap<T> sm(shift.value().data.data(), d);
  for (int64_t r = 0; r < rows; ++r) {
    CArrMap<T> xr(x.value().data.data() + r * d, d);
    ArrMap<T> hr(xhat.data.data() + r * d, d);
    const T mu = xr.mean();
    hr = xr - mu;
    const T var = hr.square().sum() / T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[size_t(r)] = inv;
    hr *= inv;
    ArrMap<T>(out.data.data() + r * d, d) = hr * gm + sm;
  }
  check_finite(out, "layer_norm");
  return detail::make_op<T>(
      std::move(out), {x, gain, shift},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& sn = *self.inputs[2];
        CArrMap<T> gamma(gn.value.data.data(), d);
        for (int64_t r = 0; r < rows; ++r) {
          CArrMap<T> g(self.grad.data.data() + r * d, d);
          CArrMap<T> h(xhat.data.data() + r * d, d);
          if (gn.requires_grad)
            ArrMap<T>(detail::grad_buf(gn).data.data(), d) += g * h;
          if (sn.requires_grad) ArrMap<T>(detail::grad_buf(sn).data.data(), d) += g;
          if (xn.requires_grad) {
            const auto dh = (g * gamma).eval();
            const T m1 = dh.mean();
            const T m2 = (dh * h).mean();
            ArrMap<T>(detail::grad_buf(xn).data.data() + r * d, d) +=
                inv_std[size_t(r)] * (dh - m1 - h * m2);
          }
        }
      });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const int64_t n = a.value().numel();
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(size_t(n));
  Tensor<T> th;
  th.shape = a.shape();
  th.data.resize(size_t(n));
  {
    CArrMap<T> x(a.value().data.data(), n);
    ArrMap<T> t(th.data.data(), n);
    t = (kC * (x + kA * x.cube())).tanh();
    ArrMap<T>(out.data.data(), n) = T(0.5) * x * (T(1) + t);
  }
  return detail::make_op<T>(std::move(out), {a}, [n, th = std::move(th)](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    constexpr T kC2 = T(0.7978845608028654);
    constexpr T kA2 = T(0.044715);
    CArrMap<T> x(an.value.data.data(), n);
    CArrMap<T> t(th.data.data(), n);
    CArrMap<T> g(self.grad.data.data(), n);
    ArrMap<T>(detail::grad_buf(an).data.data(), n) +=
        g * (T(0.5) * (T(1) + t) +
             T(0.5) * x * (T(1) - t.square()) * kC2 * (T(1) + T(3) * kA2 * x.square()));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  const int64_t n = a.value().numel();
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(size_t(n));
  // sigma(x) = 0.5 (1 + tanh(x/2)), stable for large |x|
  ArrMap<T>(out.data.data(), n) =
      T(0.5) * (T(1) + (CArrMap<T>(a.value().data.data(), n) * T(0.5)).tanh());
  return detail::make_op<T>(std::move(out), {a}, [n](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    CArrMap<T> y(self.value.data.data(), n);
    CArrMap<T> g(self.grad.data.data(), n);
    ArrMap<T>(detail::grad_buf(an).data.data(), n) += g * y * (T(1) - y);
  });
}

// Inverted dropout: at train time kept activations are scaled by 1/keep so
// that inference needs no rescaling. rate must lie in [0, 1).
template <typename T>
Var<T> dropout(const Var<T>& a, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ContractError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return a;
  const int64_t n = a.value().numel();
  const T inv_keep = T(1.0 / (1.0 - rate));
  Tensor<T> mask;
  mask.shape = a.shape();
  mask.data.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) mask.data[size_t(i)] = rng.uniform() >= rate ? inv_keep : T(0);
  Tensor<T> out;
  out.shape = a.shape();
  out.data.resize(size_t(n));
  ArrMap<T>(out.data.data(), n) =
      CArrMap<T>(a.value().data.data(), n) * CArrMap<T>(mask.data.data(), n);
  return detail::make_op<T>(std::move(out), {a},
                            [n, mask = std::move(mask)](detail::Node<T>& self) {
                              auto& an = *self.inputs[0];
                              if (!an.requires_grad) return;
                              ArrMap<T>(detail::grad_buf(an).data.data(), n) +=
                                  CArrMap<T>(self.grad.data.data(), n) *
                                  CArrMap<T>(mask.data.data(), n);
                            });
}

// ---------------------------------------------------------------------------
// Structural ops used by the encoders and fusion
// ---------------------------------------------------------------------------

// Slice along the last axis: columns [start, start+len).
template <typename T>
Var<T> slice_last(const Var<T>& a, int64_t start, int64_t len) {
  const int64_t d = a.value().last_dim();
  if (start < 0 || len <= 0 || start + len > d)
    throw DimensionError("slice_last: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of width " + std::to_string(d));
  const int64_t rows = a.value().lead();
  Shape oshape = a.shape();
  oshape.back() = len;
  Tensor<T> out(oshape);
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data.data() + r * d + start, size_t(len),
                out.data.data() + r * len);
  return detail::make_op<T>(std::move(out), {a}, [rows, d, start, len](detail::Node<T>& self) {
    auto& an = *self.inputs[0];
    if (!an.requires_grad) return;
    auto& g = detail::grad_buf(an);
    for (int64_t r = 0; r < rows; ++r)
      ArrMap<T>(g.data.data() + r * d + start, len) +=
          CArrMap<T>(self.grad.data.data() + r * len, len);
  });
}

// Concatenate along the last axis; all operands share their leading shape.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no operands");
  const int64_t rows = parts[0].value().lead();
  Shape lead_shape = parts[0].shape();
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    Shape ls = p.shape();
    if (Shape(ls.begin(), ls.end() - 1) !=
        Shape(lead_shape.begin(), lead_shape.end() - 1))
      throw DimensionError("concat_last: leading shapes differ: " + shape_str(lead_shape) +
                           " vs " + shape_str(ls));
    widths.push_back(p.value().last_dim());
    total += widths.back();
  }
  Shape oshape = lead_shape;
  oshape.back() = total;
  Tensor<T> out(oshape);
  int64_t off = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const int64_t w = widths[i];
    const T* src = parts[i].value().data.data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(src + r * w, size_t(w), out.data.data() + r * total + off);
    off += w;
  }
  return detail::make_op<T>(std::move(out), parts,
                            [rows, total, widths](detail::Node<T>& self) {
                              int64_t off2 = 0;
                              for (size_t i = 0; i < self.inputs.size(); ++i) {
                                const int64_t w = widths[i];
                                auto& n = *self.inputs[i];
                                if (n.requires_grad) {
                                  auto& g = detail::grad_buf(n);
                                  for (int64_t r = 0; r < rows; ++r)
                                    ArrMap<T>(g.data.data() + r * w, w) += CArrMap<T>(
                                        self.grad.data.data() + r * total + off2, w);
                                }
                                off2 += w;
                              }
                            });
}

// Prepend a shared learned token to every sequence in the batch:
// (B,N,D) + (D) -> (B,N+1,D).
template <typename T>
Var<T> prepend_token(const Var<T>& tokens, const Var<T>& tok) {
  const Tensor<T>& X = tokens.value();
  if (X.rank() != 3 || tok.value().numel() != X.dim(2))
    throw DimensionError("prepend_token: tokens " + shape_str(X.shape) + ", token " +
                         shape_str(tok.shape()));
  const int64_t bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out({bsz, n + 1, d});
  for (int64_t b = 0; b < bsz; ++b) {
    std::copy_n(tok.value().data.data(), size_t(d), out.data.data() + b * (n + 1) * d);
    std::copy_n(X.data.data() + b * n * d, size_t(n * d),
                out.data.data() + b * (n + 1) * d + d);
  }
  return detail::make_op<T>(std::move(out), {tokens, tok}, [bsz, n, d](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& tn = *self.inputs[1];
    for (int64_t b = 0; b < bsz; ++b) {
      if (tn.requires_grad)
        ArrMap<T>(detail::grad_buf(tn).data.data(), d) +=
            CArrMap<T>(self.grad.data.data() + b * (n + 1) * d, d);
      if (xn.requires_grad)
        ArrMap<T>(detail::grad_buf(xn).data.data() + b * n * d, n * d) +=
            CArrMap<T>(self.grad.data.data() + b * (n + 1) * d + d, n * d);
    }
  });
}

// Select one token position from every sequence: (B,N,D) -> (B,D).
template <typename T>
Var<T> select_token(const Var<T>& x, int64_t idx) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 3 || idx < 0 || idx >= X.dim(1))
    throw DimensionError("select_token: index " + std::to_string(idx) + " in " +
                         shape_str(X.shape));
  const int64_t bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out({bsz, d});
  for (int64_t b = 0; b < bsz; ++b)
    std::copy_n(X.data.data() + (b * n + idx) * d, size_t(d), out.data.data() + b * d);
  return detail::make_op<T>(std::move(out), {x}, [bsz, n, d, idx](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = detail::grad_buf(xn);
    for (int64_t b = 0; b < bsz; ++b)
      ArrMap<T>(g.data.data() + (b * n + idx) * d, d) +=
          CArrMap<T>(self.grad.data.data() + b * d, d);
  });
}

// Mean over the token axis: (B,N,D) -> (B,D).
template <typename T>
Var<T> mean_tokens(const Var<T>& x) {
  const Tensor<T>& X = x.value();
  if (X.rank() != 3) throw DimensionError("mean_tokens expects rank 3, got " +
                                          shape_str(X.shape));
  const int64_t bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out({bsz, d});
  for (int64_t b = 0; b < bsz; ++b) {
    CMatMap<T> xs(X.data.data() + b * n * d, n, d);
    MatMap<T>(out.data.data() + b * d, 1, d) = xs.colwise().mean();
  }
  return detail::make_op<T>(std::move(out), {x}, [bsz, n, d](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = detail::grad_buf(xn);
    const T inv = T(1) / T(n);
    for (int64_t b = 0; b < bsz; ++b) {
      CArrMap<T> gb(self.grad.data.data() + b * d, d);
      MatMap<T> gx(g.data.data() + b * n * d, n, d);
      gx.array().rowwise() += (gb * inv).transpose();
    }
  });
}

// Stack per-modality rows into a token axis: M tensors (B,D) -> (B,M,D).
template <typename T>
Var<T> stack_tokens(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("stack_tokens: no operands");
  const int64_t bsz = parts[0].value().dim(0), d = parts[0].value().dim(1);
  for (const auto& p : parts) require_same_shape(p.shape(), parts[0].shape(), "stack_tokens");
  const int64_t m = int64_t(parts.size());
  Tensor<T> out({bsz, m, d});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t b = 0; b < bsz; ++b)
      std::copy_n(parts[size_t(i)].value().data.data() + b * d, size_t(d),
                  out.data.data() + (b * m + i) * d);
  return detail::make_op<T>(std::move(out), parts, [bsz, m, d](detail::Node<T>& self) {
    for (int64_t i = 0; i < m; ++i) {
      auto& n = *self.inputs[size_t(i)];
      if (!n.requires_grad) continue;
      auto& g = detail::grad_buf(n);
      for (int64_t b = 0; b < bsz; ++b)
        ArrMap<T>(g.data.data() + b * d, d) +=
            CArrMap<T>(self.grad.data.data() + (b * m + i) * d, d);
    }
  });
}

// Gather elements of a rank-1 tensor by index.
template <typename T>
Var<T> gather(const Var<T>& x, std::vector<int64_t> idx) {
  if (x.value().rank() != 1) throw DimensionError("gather expects rank 1");
  const int64_t n = x.value().numel();
  Tensor<T> out({int64_t(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw DimensionError("gather: index out of range");
    out.data[i] = x.value().data[size_t(idx[i])];
  }
  return detail::make_op<T>(std::move(out), {x}, [idx = std::move(idx)](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    auto& g = detail::grad_buf(xn);
    for (size_t i = 0; i < idx.size(); ++i) g.data[size_t(idx[i])] += self.grad.data[i];
  });
}

// softmax(q k^T / sqrt(d)) v for rank-2 (N,d) or rank-3 (B,N,d) inputs.
// Composed from matmul/softmax so gradients follow from the parts.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const int rank = q.value().rank();
  if (rank != k.value().rank() || rank != v.value().rank() || (rank != 2 && rank != 3))
    throw DimensionError("scaled_dot_attention: ranks must match and be 2 or 3");
  const int64_t d = q.value().last_dim();
  if (k.value().last_dim() != d)
    throw DimensionError("scaled_dot_attention: query/key width mismatch");
  Var<T> kt = (rank == 2) ? transpose(k) : permute(k, {0, 2, 1});
  Var<T> scores = scale(matmul(q, kt), T(1) / T(std::sqrt(double(d))));
  return matmul(softmax(scores), v);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

namespace detail {

// Fixed random projection so the scalar objective exercises every output
// coordinate (a plain sum would be blind to e.g. softmax, whose outputs
// always sum to one).
template <typename T>
std::vector<T> projection_weights(int64_t n, uint64_t seed) {
  Rng rng(Rng::mix({seed, uint64_t(n)}));
  std::vector<T> w(static_cast<size_t>(n), T(0));
  for (auto& x : w) x = T(rng.uniform(-1.0, 1.0));
  return w;
}

template <typename T>
double project(const Tensor<T>& y, const std::vector<T>& w) {
  double s = 0;
  for (int64_t i = 0; i < y.numel(); ++i) s += double(y[i]) * double(w[size_t(i)]);
  return s;
}

}  // namespace detail

// Compares the analytic gradient of (a fixed projection of) f against central
// finite differences at x. Returns max over elements of
// |analytic - numeric| / max(1, |numeric|).
template <typename T>
double finite_diff_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x,
                         double step, uint64_t proj_seed = 0x9d15) {
  if (step <= 0) throw ContractError("finite_diff_check: step must be positive");
  Var<T> vx(x, /*requires_grad=*/true);
  Var<T> y = f(vx);
  const auto w = detail::projection_weights<T>(y.value().numel(), proj_seed);
  Tensor<T> wt(y.value().shape);
  std::copy(w.begin(), w.end(), wt.data.begin());
  Var<T> wv(std::move(wt), false);
  Var<T> loss = sum_all(mul(y, wv));
  backward(loss);
  Tensor<T> analytic =
      vx.has_grad() ? vx.grad() : Tensor<T>::zeros(x.shape);

  double worst = 0.0;
  Tensor<T> xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T orig = xp[i];
    xp[i] = orig + T(step);
    const double up = detail::project(f(Var<T>(xp)).value(), w);
    xp[i] = orig - T(step);
    const double dn = detail::project(f(Var<T>(xp)).value(), w);
    xp[i] = orig;
    const double numeric = (up - dn) / (2.0 * step);
    const double err = std::abs(double(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// Same check against a set of live parameters: f() rebuilds the graph from
// the current parameter values; each parameter is perturbed in place.
template <typename T>
double finite_diff_check_params(const std::function<Var<T>()>& f, std::vector<Var<T>> params,
                                double step, uint64_t proj_seed = 0x9d15) {
  if (step <= 0) throw ContractError("finite_diff_check: step must be positive");
  for (auto& p : params) p.zero_grad();
  Var<T> y = f();
  const auto w = detail::projection_weights<T>(y.value().numel(), proj_seed);
  Tensor<T> wt(y.value().shape);
  std::copy(w.begin(), w.end(), wt.data.begin());
  Var<T> wv(std::move(wt), false);
  backward(sum_all(mul(y, wv)));

  double worst = 0.0;
  for (auto& p : params) {
    Tensor<T> analytic = p.has_grad() ? p.grad() : Tensor<T>::zeros(p.shape());
    Tensor<T>& pv = p.mutable_value();
    for (int64_t i = 0; i < pv.numel(); ++i) {
      const T orig = pv[i];
      pv[i] = orig + T(step);
      const double up = detail::project(f().value(), w);
      pv[i] = orig - T(step);
      const double dn = detail::project(f().value(), w);
      pv[i] = orig;
      const double numeric = (up - dn) / (2.0 * step);
      const double err =
          std::abs(double(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace dfast
