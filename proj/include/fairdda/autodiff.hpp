#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass. Each recorded node owns
// its value and, during backward(), a gradient buffer of the same shape. Leaves
// are either constants (no gradient) or Parameters, whose gradient is added to
// Parameter::grad at the end of each backward sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fairdda/errors.hpp"
#include "fairdda/tensor.hpp"

namespace fairdda {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> first_moment;
  Tensor<T> second_moment;
  std::int64_t step = 0;
  bool weight_decay = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool decay = false)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.rows(), value.cols()),
        first_moment(value.rows(), value.cols()),
        second_moment(value.rows(), value.cols()),
        weight_decay(decay) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename T>
class Tape {
 public:
  // Receives the gradient flowing into the node; pushes contributions into parents.
  using Backward = std::function<void(const Tensor<T>& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    check_finite("constant", value);
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, nullptr});
    return {this, nodes_.size() - 1};
  }

  Var<T> parameter(Parameter<T>& p) {
    check_finite(p.name.empty() ? "parameter" : p.name, p.value);
    nodes_.push_back(Node{p.value, {}, true, nullptr, &p});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents,
                Backward fn) {
    check_finite(op, value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_[p.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : nullptr, nullptr});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of a node, allocated on first touch. Only valid inside backward().
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Gradient of the last backward() with respect to v (zero tensor if unreachable).
  Tensor<T> gradient_of(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Reverse sweep from a scalar. Parameter gradients accumulate across calls.
  void backward(Var<T> loss) {
    if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward() requires a scalar loss");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      // Closures only touch gradients of earlier nodes, so n.grad stays put.
      if (n.backward) n.backward(n.grad, *this);
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        if (pg.empty()) pg = Tensor<T>(n.value.rows(), n.value.cols());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += nodes_[i].grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Count of rows whose norm was zero in a cosine similarity on this tape.
  std::size_t zero_norm_rows = 0;

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    Backward backward;
    Parameter<T>* param;
  };

  static void check_finite(const std::string& op, const Tensor<T>& t) {
    if (!t.all_finite()) throw NonFiniteError("non-finite value produced by " + op);
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

template <typename T>
void accumulate(Tape<T>& tape, Var<T> v, const Tensor<T>& g, T scale = T{1}) {
  if (!tape.requires_grad(v)) return;
  auto& dst = tape.grad(v);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const char* op, Var<T> x, Fwd fwd, Deriv deriv) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return x.tape->record(op, std::move(out), {x}, [x, deriv](const Tensor<T>& g, Tape<T>& tape) {
    if (!tape.requires_grad(x)) return;
    const Tensor<T>& xv = tape.value(x);
    auto& dx = tape.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(xv[i]);
  });
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// log(sigmoid(x)) without underflow for large negative x.
template <typename T>
T log_sigmoid(T x) {
  if (x >= T{0}) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& tape) {
    detail::accumulate(tape, a, g);
    detail::accumulate(tape, b, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& tape) {
    detail::accumulate(tape, a, g);
    detail::accumulate(tape, b, g, T{-1});
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& tape) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (tape.requires_grad(a)) {
      auto& da = tape.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b)) {
      auto& db = tape.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return s * v; }, [s](T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T) { return T{1}; });
}

template <typename T>
Var<T> neg(Var<T> x) {
  return scale(x, T{-1});
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return detail::sigmoid(v); },
      [](T v) {
        const T s = detail::sigmoid(v);
        return s * (T{1} - s);
      });
}

template <typename T>
Var<T> log_sigmoid(Var<T> x) {
  return detail::unary<T>(
      "log_sigmoid", x, [](T v) { return detail::log_sigmoid(v); },
      [](T v) { return T{1} - detail::sigmoid(v); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Var<T> log(Var<T> x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  return x.tape->record("sum", Tensor<T>::scalar(acc), {x}, [x](const Tensor<T>& g, Tape<T>& tape) {
    if (!tape.requires_grad(x)) return;
    auto& dx = tape.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(n));
}

// Sum over columns: (r x c) -> (r x 1).
template <typename T>
Var<T> row_sum(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T acc{0};
    for (T v : xv.row(r)) acc += v;
    out[r] = acc;
  }
  return x.tape->record("row_sum", std::move(out), {x}, [x](const Tensor<T>& g, Tape<T>& tape) {
    if (!tape.requires_grad(x)) return;
    auto& dx = tape.grad(x);
    for (std::size_t r = 0; r < dx.rows(); ++r)
      for (auto& v : dx.row(r)) v += g[r];
  });
}

// Diagonal of a square matrix as a column vector.
template <typename T>
Var<T> diag(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rows() != xv.cols()) throw ShapeError("diag of a non-square matrix " + shape_string(xv));
  Tensor<T> out(xv.rows(), 1);
  for (std::size_t i = 0; i < xv.rows(); ++i) out[i] = xv(i, i);
  return x.tape->record("diag", std::move(out), {x}, [x](const Tensor<T>& g, Tape<T>& tape) {
    if (!tape.requires_grad(x)) return;
    auto& dx = tape.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx(i, i) += g[i];
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    auto o = out.row(r);
    T mx = in[0];
    for (T v : in) mx = std::max(mx, v);
    T z{0};
    for (std::size_t c = 0; c < in.size(); ++c) z += (o[c] = std::exp(in[c] - mx));
    for (auto& v : o) v /= z;
  }
  return x.tape->record("softmax_rows", std::move(out), {x},
                        [x, self = x.tape->size()](const Tensor<T>& g, Tape<T>& tape) {
                          if (!tape.requires_grad(x)) return;
                          const auto& y = tape.value(Var<T>{&tape, self});
                          auto& dx = tape.grad(x);
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            T s{0};
                            for (std::size_t c = 0; c < y.cols(); ++c) s += g(r, c) * y(r, c);
                            for (std::size_t c = 0; c < y.cols(); ++c)
                              dx(r, c) += y(r, c) * (g(r, c) - s);
                          }
                        });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    T mx = in[0];
    for (T v : in) mx = std::max(mx, v);
    T z{0};
    for (T v : in) z += std::exp(v - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) = in[c] - lse;
  }
  return x.tape->record("log_softmax_rows", std::move(out), {x},
                        [x, self = x.tape->size()](const Tensor<T>& g, Tape<T>& tape) {
                          if (!tape.requires_grad(x)) return;
                          const auto& y = tape.value(Var<T>{&tape, self});
                          auto& dx = tape.grad(x);
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            T s{0};
                            for (std::size_t c = 0; c < y.cols(); ++c) s += g(r, c);
                            for (std::size_t c = 0; c < y.cols(); ++c)
                              dx(r, c) += g(r, c) - std::exp(y(r, c)) * s;
                          }
                        });
}

// out(r) = x(r, columns[r]) as a column vector.
template <typename T>
Var<T> pick_columns(Var<T> x, std::vector<std::uint32_t> columns) {
  const auto& xv = x.value();
  if (columns.size() != xv.rows()) throw ShapeError("pick_columns: one column per row required");
  Tensor<T> out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (columns[r] >= xv.cols()) throw ShapeError("pick_columns: column out of range");
    out[r] = xv(r, columns[r]);
  }
  return x.tape->record("pick_columns", std::move(out), {x},
                        [x, cols = std::move(columns)](const Tensor<T>& g, Tape<T>& tape) {
                          if (!tape.requires_grad(x)) return;
                          auto& dx = tape.grad(x);
                          for (std::size_t r = 0; r < cols.size(); ++r) dx(r, cols[r]) += g[r];
                        });
}

// Row gather: out.row(i) = x.row(index[i]). Backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::uint32_t> index) {
  const auto& xv = x.value();
  Tensor<T> out(index.size(), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = xv.row(index[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return x.tape->record("gather_rows", std::move(out), {x},
                        [x, idx = std::move(index)](const Tensor<T>& g, Tape<T>& tape) {
                          if (!tape.requires_grad(x)) return;
                          auto& dx = tape.grad(x);
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            axpy<T>(T{1}, g.row(i), dx.row(idx[i]));
                        });
}

// Per-row inner product: (r x d), (r x d) -> (r x 1).
template <typename T>
Var<T> rowwise_dot(Var<T> a, Var<T> b) {
  detail::require_same_shape("rowwise_dot", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) out[r] = dot<T>(av.row(r), bv.row(r));
  return a.tape->record("rowwise_dot", std::move(out), {a, b},
                        [a, b](const Tensor<T>& g, Tape<T>& tape) {
                          const auto& av = tape.value(a);
                          const auto& bv = tape.value(b);
                          if (tape.requires_grad(a)) {
                            auto& da = tape.grad(a);
                            for (std::size_t r = 0; r < av.rows(); ++r)
                              axpy<T>(g[r], bv.row(r), da.row(r));
                          }
                          if (tape.requires_grad(b)) {
                            auto& db = tape.grad(b);
                            for (std::size_t r = 0; r < av.rows(); ++r)
                              axpy<T>(g[r], av.row(r), db.row(r));
                          }
                        });
}

namespace detail {

template <typename T>
using RowMajorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
ConstRowMajorMap<T> as_matrix(const Tensor<T>& t) {
  return ConstRowMajorMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
RowMajorMap<T> as_matrix(Tensor<T>& t) {
  return RowMajorMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

// out += a * b   (a: n x k, b: k x m)
template <typename T>
void gemm_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  as_matrix(out).noalias() += as_matrix(a) * as_matrix(b);
}

// out += a * b^T   (a: n x k, b: m x k)
template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  as_matrix(out).noalias() += as_matrix(a) * as_matrix(b).transpose();
}

// out += a^T * b   (a: k x n, b: k x m)
template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  as_matrix(out).noalias() += as_matrix(a).transpose() * as_matrix(b);
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_string(av) + " * " + shape_string(bv));
  }
  Tensor<T> out(av.rows(), bv.cols());
  detail::gemm_nn(av, bv, out);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b](const Tensor<T>& g, Tape<T>& tape) {
    if (tape.requires_grad(a)) detail::gemm_nt(g, tape.value(b), tape.grad(a));
    if (tape.requires_grad(b)) detail::gemm_tn(tape.value(a), g, tape.grad(b));
  });
}

// x (r x c) plus a 1 x c row vector added to every row.
template <typename T>
Var<T> add_row_vector(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_row_vector: " + shape_string(xv) + " + " + shape_string(bv));
  }
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) axpy<T>(T{1}, bv.row(0), out.row(r));
  return x.tape->record("add_row_vector", std::move(out), {x, bias},
                        [x, bias](const Tensor<T>& g, Tape<T>& tape) {
                          detail::accumulate(tape, x, g);
                          if (tape.requires_grad(bias)) {
                            auto& db = tape.grad(bias);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              axpy<T>(T{1}, g.row(r), db.row(0));
                          }
                        });
}

// Sparse matrix in coordinate form; entries need not be sorted.
template <typename T>
struct SparseView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<const std::uint32_t> row_index;
  std::span<const std::uint32_t> col_index;
  std::span<const T> values;
};

namespace detail {

// out += S' X where S' = S scaled per entry by weights (if given), optionally transposed.
template <typename T>
void spmm_accumulate(const SparseView<T>& s, const std::type_identity_t<T>* weights, const Tensor<T>& x,
                     Tensor<T>& out, bool transpose) {
  for (std::size_t e = 0; e < s.values.size(); ++e) {
    const T a = weights ? s.values[e] * weights[e] : s.values[e];
    if (a == T{0}) continue;
    const auto r = transpose ? s.col_index[e] : s.row_index[e];
    const auto c = transpose ? s.row_index[e] : s.col_index[e];
    axpy<T>(a, x.row(c), out.row(r));
  }
}

}  // namespace detail

// y = S x (or S^T x). When edge_weights is given, entry e of S is multiplied by
// edge_weights[e] and the product is differentiable in the weights as well.
template <typename T>
Var<T> sparse_dense_matmul(const SparseView<T>& s, Var<T> x, bool transpose = false,
                           const Var<T>* edge_weights = nullptr) {
  const auto& xv = x.value();
  const std::size_t in_dim = transpose ? s.rows : s.cols;
  const std::size_t out_dim = transpose ? s.cols : s.rows;
  if (xv.rows() != in_dim) {
    throw ShapeError("sparse_dense_matmul: operand has " + std::to_string(xv.rows()) +
                     " rows, expected " + std::to_string(in_dim));
  }
  if (edge_weights && edge_weights->value().size() != s.values.size()) {
    throw ShapeError("sparse_dense_matmul: edge weight count does not match entry count");
  }
  Tensor<T> out(out_dim, xv.cols());
  detail::spmm_accumulate(s, edge_weights ? edge_weights->value().data() : nullptr, xv, out,
                          transpose);
  if (edge_weights == nullptr) {
    return x.tape->record("sparse_dense_matmul", std::move(out), {x},
                          [s, x, transpose](const Tensor<T>& g, Tape<T>& tape) {
                            if (tape.requires_grad(x))
                              detail::spmm_accumulate(s, nullptr, g, tape.grad(x), !transpose);
                          });
  }
  const Var<T> w = *edge_weights;
  return x.tape->record(
      "sparse_dense_matmul", std::move(out), {x, w},
      [s, x, w, transpose](const Tensor<T>& g, Tape<T>& tape) {
        const auto& wv = tape.value(w);
        if (tape.requires_grad(x)) detail::spmm_accumulate(s, wv.data(), g, tape.grad(x), !transpose);
        if (tape.requires_grad(w)) {
          const auto& xv = tape.value(x);
          auto& dw = tape.grad(w);
          for (std::size_t e = 0; e < s.values.size(); ++e) {
            const auto r = transpose ? s.col_index[e] : s.row_index[e];
            const auto c = transpose ? s.row_index[e] : s.col_index[e];
            dw[e] += s.values[e] * dot<T>(g.row(r), xv.row(c));
          }
        }
      });
}

// Pairwise cosine similarity: out(i, j) = cos(a_i, b_j). Rows with zero norm
// produce similarity 0 and are counted in Tape::zero_norm_rows.
template <typename T>
Var<T> cosine_sim_matrix(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("cosine_sim_matrix: " + shape_string(av) + " vs " + shape_string(bv));
  }
  auto normalize = [&](const Tensor<T>& x, std::vector<T>& inv_norm) {
    Tensor<T> n(x.rows(), x.cols());
    inv_norm.assign(x.rows(), T{0});
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T nn = std::sqrt(dot<T>(x.row(r), x.row(r)));
      if (nn <= T{1e-12}) {
        ++a.tape->zero_norm_rows;
        continue;
      }
      inv_norm[r] = T{1} / nn;
      for (std::size_t c = 0; c < x.cols(); ++c) n(r, c) = x(r, c) * inv_norm[r];
    }
    return n;
  };
  auto a_inv = std::make_shared<std::vector<T>>();
  auto b_inv = std::make_shared<std::vector<T>>();
  auto an = std::make_shared<Tensor<T>>(normalize(av, *a_inv));
  auto bn = std::make_shared<Tensor<T>>(normalize(bv, *b_inv));
  Tensor<T> out(av.rows(), bv.rows());
  detail::gemm_nt(*an, *bn, out);
  return a.tape->record(
      "cosine_sim_matrix", std::move(out), {a, b},
      [a, b, an, bn, a_inv, b_inv](const Tensor<T>& g, Tape<T>& tape) {
        // d/dx of x/|x| applied to v: (v - (v.n) n) / |x|
        auto project = [](const Tensor<T>& gn, const Tensor<T>& n, const std::vector<T>& inv,
                          Tensor<T>& dst) {
          for (std::size_t r = 0; r < n.rows(); ++r) {
            if (inv[r] == T{0}) continue;
            const T s = dot<T>(gn.row(r), n.row(r));
            for (std::size_t c = 0; c < n.cols(); ++c)
              dst(r, c) += (gn(r, c) - s * n(r, c)) * inv[r];
          }
        };
        if (tape.requires_grad(a)) {
          Tensor<T> gan(an->rows(), an->cols());
          detail::gemm_nn(g, *bn, gan);
          project(gan, *an, *a_inv, tape.grad(a));
        }
        if (tape.requires_grad(b)) {
          Tensor<T> gbn(bn->rows(), bn->cols());
          detail::gemm_tn(g, *an, gbn);
          project(gbn, *bn, *b_inv, tape.grad(b));
        }
      });
}

namespace detail {

template <typename T>
std::vector<double> pairwise_sq_distances(const Tensor<T>& x) {
  const std::size_t m = x.rows();
  std::vector<double> d2(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = static_cast<double>(x(i, c)) - static_cast<double>(x(j, c));
        s += diff * diff;
      }
      d2[i * m + j] = d2[j * m + i] = s;
    }
  return d2;
}

}  // namespace detail

// Median of the pairwise Euclidean distances between rows (mean of the two
// middle values for an even pair count), as a 1 x 1 node. Falls back to the
// constant 1 when the median is zero.
template <typename T>
Var<T> median_pairwise_distance(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t m = xv.rows();
  if (m < 2) throw Error("median_pairwise_distance needs at least two rows");
  const auto d2 = detail::pairwise_sq_distances(xv);
  struct Pair {
    double dist;
    std::uint32_t i, j;
  };
  std::vector<Pair> pairs;
  pairs.reserve(m * (m - 1) / 2);
  for (std::uint32_t i = 0; i < m; ++i)
    for (std::uint32_t j = i + 1; j < m; ++j) pairs.push_back({std::sqrt(d2[i * m + j]), i, j});
  auto less = [](const Pair& a, const Pair& b) {
    return a.dist != b.dist ? a.dist < b.dist : (a.i != b.i ? a.i < b.i : a.j < b.j);
  };
  const std::size_t mid = pairs.size() / 2;
  std::nth_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(mid), pairs.end(), less);
  std::vector<Pair> chosen{pairs[mid]};
  if (pairs.size() % 2 == 0)
    chosen.push_back(*std::max_element(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(mid), less));
  double med = 0.0;
  for (const auto& p : chosen) med += p.dist;
  med /= static_cast<double>(chosen.size());
  if (!(med > 0.0)) return x.tape->constant(Tensor<T>::scalar(T{1}));
  return x.tape->record(
      "median_pairwise_distance", Tensor<T>::scalar(static_cast<T>(med)), {x},
      [x, chosen](const Tensor<T>& g, Tape<T>& tape) {
        if (!tape.requires_grad(x)) return;
        const auto& xv = tape.value(x);
        auto& dx = tape.grad(x);
        const double w = static_cast<double>(g[0]) / static_cast<double>(chosen.size());
        for (const auto& p : chosen) {
          if (p.dist == 0.0) continue;
          for (std::size_t c = 0; c < xv.cols(); ++c) {
            const T step = static_cast<T>(w * (static_cast<double>(xv(p.i, c)) - xv(p.j, c)) / p.dist);
            dx(p.i, c) += step;
            dx(p.j, c) -= step;
          }
        }
      });
}

// RBF Gram matrix K_ij = exp(-|x_i - x_j|^2 / (2 s^2)) with a 1 x 1 bandwidth
// node s, differentiable in both.
template <typename T>
Var<T> rbf_gram(Var<T> x, Var<T> bandwidth) {
  const auto& xv = x.value();
  if (bandwidth.value().size() != 1) throw ShapeError("rbf_gram: bandwidth must be 1 x 1");
  const double s = bandwidth.value()[0];
  if (!(s > 0.0)) throw Error("rbf_gram: bandwidth must be positive");
  const std::size_t m = xv.rows();
  auto d2 = std::make_shared<std::vector<double>>(detail::pairwise_sq_distances(xv));
  const double inv2s2 = 1.0 / (2.0 * s * s);
  Tensor<T> out(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = i == j ? T{1} : static_cast<T>(std::exp(-(*d2)[i * m + j] * inv2s2));
  return x.tape->record(
      "rbf_gram", std::move(out), {x, bandwidth},
      [x, bandwidth, s, d2, self = x.tape->size()](const Tensor<T>& g, Tape<T>& tape) {
        const auto& xv = tape.value(x);
        const auto& k = tape.value(Var<T>{&tape, self});
        const std::size_t m = xv.rows();
        if (tape.requires_grad(x)) {
          auto& dx = tape.grad(x);
          const double c2 = 1.0 / (s * s);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
              if (i == j) continue;
              // K_ij and K_ji both depend on x_i: dK_ij/dx_i = -K_ij (x_i - x_j) / s^2.
              const T w = static_cast<T>(-(static_cast<double>(g(i, j)) + g(j, i)) * k(i, j) * c2);
              if (w == T{0}) continue;
              for (std::size_t c = 0; c < xv.cols(); ++c) dx(i, c) += w * (xv(i, c) - xv(j, c));
            }
          }
        }
        if (tape.requires_grad(bandwidth)) {
          // dK_ij/ds = K_ij d_ij^2 / s^3
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
              if (i != j) acc += static_cast<double>(g(i, j)) * k(i, j) * (*d2)[i * m + j];
          tape.grad(bandwidth)[0] += static_cast<T>(acc / (s * s * s));
        }
      });
}

// RBF Gram matrix with a constant bandwidth.
template <typename T>
Var<T> rbf_gram(Var<T> x, double bandwidth) {
  if (!(bandwidth > 0.0)) throw Error("rbf_gram: bandwidth must be positive");
  return rbf_gram(x, x.tape->constant(Tensor<T>::scalar(static_cast<T>(bandwidth))));
}

}  // namespace fairdda
