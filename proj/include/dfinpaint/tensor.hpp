// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dfinpaint/common.hpp"
#include "dfinpaint/rng.hpp"

namespace dfi {

/// Dense row-major array of doubles with an optional gradient slot.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    check_shape();
    data.assign(numel(shape), fill);
  }

  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (numel(shape) != data.size()) {
      throw DimensionError("Tensor: shape " + to_string(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double item() const {
    if (data.size() != 1) {
      throw DimensionError("Tensor::item on shape " + to_string(shape));
    }
    return data[0];
  }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), 0.0); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("Tensor: zero-sized dimension in " + to_string(shape));
    }
  }
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
};

/// Computation record for reverse-mode differentiation.
///
/// Operations append nodes in execution order; backward() walks them once in
/// reverse. A tape supports a single backward pass: replaying it requires a
/// new forward pass on a fresh tape.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const std::vector<double>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Trainable input. Gradients are added into param.grad by backward().
  Var leaf(Tensor& param) {
    if (auto it = leaf_cache_.find(&param); it != leaf_cache_.end()) return {this, it->second};
    Node node;
    node.value = Tensor(param.shape, param.data);
    node.needs_grad = grad_enabled_;
    node.param = grad_enabled_ ? &param : nullptr;
    node.op = "leaf";
    nodes_.push_back(std::move(node));
    leaf_cache_.emplace(&param, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  // Read-only use of a parameter owned elsewhere (frozen networks).
  Var frozen(const Tensor& t) {
    if (auto it = frozen_cache_.find(&t); it != frozen_cache_.end()) return {this, it->second};
    Var v = constant(Tensor(t.shape, t.data));
    frozen_cache_.emplace(&t, v.id);
    return v;
  }

  Var constant(Tensor value) {
    Node node;
    node.value = std::move(value);
    node.op = "constant";
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> parents,
             Backward backward) {
    return record_impl(op, std::move(value), parents.begin(), parents.end(), std::move(backward));
  }

  Var record(std::string_view op, Tensor value, std::span<const Var> parents, Backward backward) {
    return record_impl(op, std::move(value), parents.begin(), parents.end(), std::move(backward));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Accumulation buffer for v's gradient; zero-filled on first use.
  std::vector<double>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  const std::vector<double>& grad(Var v) const { return nodes_.at(v.id).grad; }

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }
  bool consumed() const { return consumed_; }

  void backward(Var root) {
    if (root.tape != this) throw StateError("backward: variable belongs to another tape");
    if (consumed_) {
      throw StateError("backward: tape already replayed; run the forward pass again");
    }
    consumed_ = true;
    if (value(root).size() != 1) {
      throw DimensionError("backward: root must be a scalar, got " + to_string(value(root).shape));
    }
    if (!nodes_[root.id].needs_grad) return;
    grad_buffer(root)[0] = 1.0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      for (double g : n.grad) {
        if (!std::isfinite(g)) {
          throw NumericError("backward: non-finite gradient at op '" + std::string(n.op) + "'");
        }
      }
      if (n.backward) {
        n.backward(*this, n.grad);
        ++visits_;
      }
      if (n.param != nullptr) {
        if (n.param->grad.empty()) n.param->grad.assign(n.param->data.size(), 0.0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Backward backward;
    Tensor* param = nullptr;
    std::string_view op;
  };

  template <typename It>
  Var record_impl(std::string_view op, Tensor value, It first, It last, Backward backward) {
    if (consumed_) throw StateError("record: tape already replayed");
    if (!value.all_finite()) {
      throw NumericError("op '" + std::string(op) + "' produced a non-finite value");
    }
    bool needs = false;
    for (It it = first; it != last; ++it) {
      if (it->tape != this) throw StateError("op '" + std::string(op) + "': mixed tapes");
      needs = needs || nodes_[it->id].needs_grad;
    }
    Node node;
    node.value = std::move(value);
    node.needs_grad = grad_enabled_ && needs;
    if (node.needs_grad) node.backward = std::move(backward);
    node.op = op;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  std::unordered_map<const Tensor*, std::size_t> leaf_cache_;
  std::unordered_map<const Tensor*, std::size_t> frozen_cache_;
  bool grad_enabled_;
  bool consumed_ = false;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
  }
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape));
  }
}

inline void accumulate(Tape& t, Var v, std::size_t i, double g) {
  if (t.requires_grad(v)) t.grad_buffer(v)[i] += g;
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(std::string_view op, Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i]);
  return a.tape->record(op, std::move(out), {a}, [a, dfdx](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& x = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x.data[i]);
  });
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
    const auto& av = t.value(a).data;
    const auto& bv = t.value(b).data;
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  return detail::unary("leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                       [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

inline Var silu(Var a) {
  return detail::unary("silu", a, [](double x) { return x * sigmoid_value(x); },
                       [](double x) {
                         const double s = sigmoid_value(x);
                         return s * (1.0 + x * (1.0 - s));
                       });
}

// log(sigmoid(x)) without forming sigmoid(x); log(1 - sigmoid(x)) == log_sigmoid(-x).
inline Var log_sigmoid(Var a) {
  return detail::unary(
      "log_sigmoid", a,
      [](double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x) { return 1.0 - sigmoid_value(x); });
}

// ---- reductions ----------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(a)) return;
    for (double& v : t.grad_buffer(a)) v += g[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

// ---- structural ----------------------------------------------------------

inline Var detach(Var a) { return a.tape->constant(Tensor(a.shape(), a.value().data)); }

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return a.tape->record("reshape", std::move(out), {a}, [a](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(a)) return;
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var transpose(Var a) {
  detail::require_rank("transpose", a.value(), 2);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out(Shape{cols, rows});
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[c * rows + r] = x[r * cols + c];
  return a.tape->record("transpose", std::move(out), {a},
                        [a, rows, cols](Tape& t, const std::vector<double>& g) {
                          if (!t.requires_grad(a)) return;
                          auto& ga = t.grad_buffer(a);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c * rows + r];
                        });
}

// Stacks rank-2 tensors with equal column counts along the row axis.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].shape().at(1);
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_rank("concat_rows", p.value(), 2);
    if (p.shape()[1] != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.shape()[0];
  }
  Tensor out(Shape{rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + offset);
    offset += p.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record("concat_rows", std::move(out), std::span<const Var>(inputs),
                               [inputs](Tape& t, const std::vector<double>& g) {
                                 std::size_t off = 0;
                                 for (const Var& p : inputs) {
                                   const std::size_t n = t.value(p).size();
                                   if (t.requires_grad(p)) {
                                     auto& gp = t.grad_buffer(p);
                                     for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                                   }
                                   off += n;
                                 }
                               });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_rows", a.value(), 2);
  if (begin >= end || end > a.shape()[0]) throw DimensionError("slice_rows: bad range");
  const std::size_t cols = a.shape()[1];
  Tensor out(Shape{end - begin, cols});
  std::copy(a.value().data.begin() + begin * cols, a.value().data.begin() + end * cols,
            out.data.begin());
  return a.tape->record("slice_rows", std::move(out), {a},
                        [a, begin, cols](Tape& t, const std::vector<double>& g) {
                          if (!t.requires_grad(a)) return;
                          auto& ga = t.grad_buffer(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
                        });
}

// ---- linear algebra ------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::require_rank("matmul", a.value(), 2);
  detail::require_rank("matmul", b.value(), 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  const double* A = a.value().data.data();
  const double* B = b.value().data.data();
  double* C = out.data.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
    const double* A = t.value(a).data.data();
    const double* B = t.value(b).data.data();
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

// x[M,N] + bias[N] broadcast over rows.
inline Var add_row(Var x, Var bias) {
  detail::require_rank("add_row", x.value(), 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.size() != n) throw DimensionError("add_row: bias length mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = x.value().data[i * n + j] + bias.value().data[j];
  return x.tape->record("add_row", std::move(out), {x, bias}, [x, bias, m, n](Tape& t, const std::vector<double>& g) {
    if (t.requires_grad(x)) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

inline Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

// Row lookup into table[K, D]; gradient scatters back into the looked-up rows.
inline Var embedding(Var table, std::span<const int> ids) {
  detail::require_rank("embedding", table.value(), 2);
  const std::size_t rows = table.shape()[0], dim = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor out(Shape{ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                           std::to_string(rows));
    }
    std::copy_n(table.value().data.begin() + static_cast<std::size_t>(ids[r]) * dim, dim,
                out.data.begin() + r * dim);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->record("embedding", std::move(out), {table},
                            [table, idv, dim](Tape& t, const std::vector<double>& g) {
                              if (!t.requires_grad(table)) return;
                              auto& gt = t.grad_buffer(table);
                              for (std::size_t r = 0; r < idv.size(); ++r)
                                for (std::size_t j = 0; j < dim; ++j)
                                  gt[static_cast<std::size_t>(idv[r]) * dim + j] += g[r * dim + j];
                            });
}

// Rows flagged in `rows` are replaced by `row` (a learned vector); others pass through.
inline Var replace_rows(Var x, std::span<const std::uint8_t> rows, Var row) {
  detail::require_rank("replace_rows", x.value(), 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (rows.size() != m || row.size() != n) throw DimensionError("replace_rows: shape mismatch");
  Tensor out = Tensor(x.shape(), x.value().data);
  for (std::size_t i = 0; i < m; ++i)
    if (rows[i]) std::copy(row.value().data.begin(), row.value().data.end(), out.data.begin() + i * n);
  std::vector<std::uint8_t> sel(rows.begin(), rows.end());
  return x.tape->record("replace_rows", std::move(out), {x, row},
                        [x, row, sel, n](Tape& t, const std::vector<double>& g) {
                          for (std::size_t i = 0; i < sel.size(); ++i) {
                            if (sel[i]) {
                              if (!t.requires_grad(row)) continue;
                              auto& gr = t.grad_buffer(row);
                              for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                            } else if (t.requires_grad(x)) {
                              auto& gx = t.grad_buffer(x);
                              for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j];
                            }
                          }
                        });
}

// ---- normalization, losses, regularization -------------------------------

// Per-row layer normalization over the last axis (population variance).
inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::require_rank("layer_norm_rows", x.value(), 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gamma.size() != n || beta.size() != n) throw DimensionError("layer_norm_rows: affine length");
  Tensor out(x.shape());
  std::vector<double> xhat(x.size()), inv_std(m);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[i * n + j] - mu) * (xv[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      out.data[i * n + j] = xhat[i * n + j] * gamma.value().data[j] + beta.value().data[j];
    }
  }
  return x.tape->record(
      "layer_norm_rows", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, m, n](Tape& t, const std::vector<double>& g) {
        const auto& gv = t.value(gamma).data;
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              detail::accumulate(t, gamma, j, g[i * n + j] * xhat[i * n + j]);
              detail::accumulate(t, beta, j, g[i * n + j]);
            }
        }
        if (!t.requires_grad(x)) return;
        auto& gx = t.grad_buffer(x);
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = g[i * n + j] * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[i * n + j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
        }
      });
}

/// Sum over selected rows of -log softmax(logits[r])[targets[r]].
/// Unselected rows receive exactly zero gradient.
inline Var cross_entropy_rows(Var logits, std::span<const int> targets,
                              std::span<const std::uint8_t> selected) {
  detail::require_rank("cross_entropy_rows", logits.value(), 2);
  const std::size_t m = logits.shape()[0], k = logits.shape()[1];
  if (targets.size() != m || selected.size() != m) {
    throw DimensionError("cross_entropy_rows: targets/selection length mismatch");
  }
  const auto& lv = logits.value().data;
  std::vector<double> probs(m * k, 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!selected[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw DimensionError("cross_entropy_rows: target out of range");
    }
    double mx = lv[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lv[r * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(lv[r * k + j] - mx) / z;
    loss += (mx + std::log(z)) - lv[r * k + static_cast<std::size_t>(targets[r])];
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> sel(selected.begin(), selected.end());
  return logits.tape->record("cross_entropy_rows", Tensor::scalar(loss), {logits},
                             [logits, probs, tv, sel, k](Tape& t, const std::vector<double>& g) {
                               if (!t.requires_grad(logits)) return;
                               auto& gl = t.grad_buffer(logits);
                               for (std::size_t r = 0; r < sel.size(); ++r) {
                                 if (!sel[r]) continue;
                                 for (std::size_t j = 0; j < k; ++j) {
                                   const double onehot = static_cast<std::size_t>(tv[r]) == j ? 1.0 : 0.0;
                                   gl[r * k + j] += g[0] * (probs[r * k + j] - onehot);
                                 }
                               }
                             });
}

// Inverted dropout; identity when p == 0.
inline Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ParameterError("dropout: p must be < 1");
  std::vector<double> keep(x.size());
  for (double& k : keep) k = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.value().data[i] * keep[i];
  return x.tape->record("dropout", std::move(out), {x}, [x, keep](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(x)) return;
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
  });
}

// ---- images (NCHW) -------------------------------------------------------

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t o, k;
  std::size_t stride, pad;
  std::size_t oh, ow;
};

inline ConvGeometry conv_geometry(std::string_view op, const Shape& in, const Shape& weight,
                                  std::size_t stride, std::size_t pad) {
  if (in.size() != 4 || weight.size() != 4) {
    throw DimensionError(std::string(op) + ": expected NCHW input and OIKK weight");
  }
  if (stride == 0) throw ParameterError(std::string(op) + ": stride must be positive");
  if (weight[1] != in[1]) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(in[1]) +
                         " channels, weight expects " + std::to_string(weight[1]));
  }
  if (weight[2] != weight[3]) throw DimensionError(std::string(op) + ": kernel must be square");
  ConvGeometry g{in[0], in[1], in[2], in[3], weight[0], weight[2], stride, pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) {
    throw DimensionError(std::string(op) + ": kernel larger than padded input");
  }
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

namespace detail {

// Output columns [lo, hi) whose input column ow*stride + kw - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t kpos, std::size_t stride,
                                                       std::size_t pad) {
  std::size_t lo = 0;
  if (kpos < pad) lo = (pad - kpos + stride - 1) / stride;
  if (in + pad < kpos + 1) return {0, 0};
  std::size_t hi = (in + pad - kpos - 1) / stride + 1;
  hi = std::min(hi, out);
  if (lo >= hi) return {0, 0};
  return {lo, hi};
}

}  // namespace detail

/// 2-D cross-correlation, zero padding. Sums run over (c, kh, kw) in order.
inline Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry("conv2d", x.shape(), weight.shape(), stride, pad);
  if (bias.size() != g.o) throw DimensionError("conv2d: bias length mismatch");
  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  const double* X = x.value().data.data();
  const double* Wt = weight.value().data.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      double* plane = out.data.data() + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* in = X + (n * g.c + c) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          const auto [oh_lo, oh_hi] = detail::valid_range(g.oh, g.h, kh, stride, pad);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const double wv = Wt[((o * g.c + c) * g.k + kh) * g.k + kw];
            const auto [ow_lo, ow_hi] = detail::valid_range(g.ow, g.w, kw, stride, pad);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* row = in + (oh * stride + kh - pad) * g.w;
              double* orow = plane + oh * g.ow;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * row[ow * stride + kw - pad];
            }
          }
        }
      }
      const double b = bias.value().data[o];
      for (std::size_t i = 0; i < g.oh * g.ow; ++i) plane[i] += b;
    }
  return x.tape->record("conv2d", std::move(out), {x, weight, bias}, [x, weight, bias, g](Tape& t, const std::vector<double>& gout) {
    const double* X = t.value(x).data.data();
    const double* Wt = t.value(weight).data.data();
    const bool need_x = t.requires_grad(x), need_w = t.requires_grad(weight);
    double* GX = need_x ? t.grad_buffer(x).data() : nullptr;
    double* GW = need_w ? t.grad_buffer(weight).data() : nullptr;
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o) {
        const double* gplane = gout.data() + (n * g.o + o) * g.oh * g.ow;
        if (t.requires_grad(bias)) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.oh * g.ow; ++i) s += gplane[i];
          t.grad_buffer(bias)[o] += s;
        }
        for (std::size_t c = 0; c < g.c; ++c) {
          const std::size_t base = (n * g.c + c) * g.h * g.w;
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            const auto [oh_lo, oh_hi] = detail::valid_range(g.oh, g.h, kh, g.stride, g.pad);
            for (std::size_t kw = 0; kw < g.k; ++kw) {
              const std::size_t widx = ((o * g.c + c) * g.k + kh) * g.k + kw;
              const double wv = Wt[widx];
              const auto [ow_lo, ow_hi] = detail::valid_range(g.ow, g.w, kw, g.stride, g.pad);
              double gw = 0.0;
              for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                const std::size_t rbase = base + (oh * g.stride + kh - g.pad) * g.w;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                  const double go = gplane[oh * g.ow + ow];
                  const std::size_t idx = rbase + ow * g.stride + kw - g.pad;
                  if (GX) GX[idx] += wv * go;
                  gw += go * X[idx];
                }
              }
              if (GW) GW[widx] += gw;
            }
          }
        }
      }
  });
}

// Per-channel scale and shift on NCHW.
inline Var channel_affine(Var x, Var gamma, Var beta) {
  detail::require_rank("channel_affine", x.value(), 4);
  const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (gamma.size() != c || beta.size() != c) throw DimensionError("channel_affine: length mismatch");
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        out.data[idx] = x.value().data[idx] * gamma.value().data[ch] + beta.value().data[ch];
      }
  return x.tape->record("channel_affine", std::move(out), {x, gamma, beta},
                        [x, gamma, beta, n, c, hw](Tape& t, const std::vector<double>& g) {
                          const auto& xv = t.value(x).data;
                          const auto& gv = t.value(gamma).data;
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t idx = (b * c + ch) * hw + i;
                                detail::accumulate(t, x, idx, g[idx] * gv[ch]);
                                detail::accumulate(t, gamma, ch, g[idx] * xv[idx]);
                                detail::accumulate(t, beta, ch, g[idx]);
                              }
                        });
}

// [1, C, H, W] -> [H*W, C], one row per spatial position in raster order.
inline Var map_to_rows(Var x) {
  detail::require_rank("map_to_rows", x.value(), 4);
  if (x.shape()[0] != 1) throw DimensionError("map_to_rows: batch must be 1");
  const std::size_t c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor out(Shape{hw, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out.data[p * c + ch] = x.value().data[ch * hw + p];
  return x.tape->record("map_to_rows", std::move(out), {x}, [x, c, hw](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(x)) return;
    auto& gx = t.grad_buffer(x);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[p * c + ch];
  });
}

inline Var rows_to_map(Var rows, std::size_t h, std::size_t w) {
  detail::require_rank("rows_to_map", rows.value(), 2);
  if (rows.shape()[0] != h * w) throw DimensionError("rows_to_map: row count mismatch");
  const std::size_t c = rows.shape()[1], hw = h * w;
  Tensor out(Shape{1, c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out.data[ch * hw + p] = rows.value().data[p * c + ch];
  return rows.tape->record("rows_to_map", std::move(out), {rows}, [rows, c, hw](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(rows)) return;
    auto& gr = t.grad_buffer(rows);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) gr[p * c + ch] += g[ch * hw + p];
  });
}

// ---- attention -----------------------------------------------------------

/// Multi-head scaled dot-product attention.
///
/// q: [Lq, D], k: [Lk, D], v: [Lk, Dv]; D and Dv split evenly across heads.
/// Keys with key_mask[j] != 0 are excluded (logit -inf). With `causal`, query i
/// may only see keys j <= i. A query with no admissible key outputs zeros.
inline Var masked_attention(Var q, Var k, Var v, std::span<const std::uint8_t> key_mask,
                            std::size_t heads, bool causal) {
  detail::require_rank("attention", q.value(), 2);
  detail::require_rank("attention", k.value(), 2);
  detail::require_rank("attention", v.value(), 2);
  const std::size_t lq = q.shape()[0], lk = k.shape()[0], d = q.shape()[1], dv = v.shape()[1];
  if (k.shape()[1] != d || v.shape()[0] != lk) throw DimensionError("attention: q/k/v shape mismatch");
  if (heads == 0 || d % heads != 0 || dv % heads != 0) {
    throw DimensionError("attention: dims not divisible by head count");
  }
  if (!key_mask.empty() && key_mask.size() != lk) {
    throw DimensionError("attention: key mask length " + std::to_string(key_mask.size()) +
                         " vs " + std::to_string(lk) + " keys");
  }
  const std::size_t dh = d / heads, dvh = dv / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> allowed(lq * lk, 0);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < lk; ++j)
      allowed[i * lk + j] = (key_mask.empty() || !key_mask[j]) && (!causal || j <= i);

  const double* Q = q.value().data.data();
  const double* K = k.value().data.data();
  const double* V = v.value().data.data();
  std::vector<double> probs(heads * lq * lk, 0.0);
  Tensor out(Shape{lq, dv});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      double* p = probs.data() + (h * lq + i) * lk;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed[i * lk + j]) continue;
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += Q[i * d + h * dh + e] * K[j * d + h * dh + e];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      if (mx == -INFINITY) continue;
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed[i * lk + j]) continue;
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < lk; ++j) {
        if (!allowed[i * lk + j]) continue;
        p[j] /= z;
        for (std::size_t e = 0; e < dvh; ++e) out.data[i * dv + h * dvh + e] += p[j] * V[j * dv + h * dvh + e];
      }
    }
  return q.tape->record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, probs, allowed, heads, lq, lk, d, dv, dh, dvh, inv_sqrt](Tape& t, const std::vector<double>& g) {
        const double* Q = t.value(q).data.data();
        const double* K = t.value(k).data.data();
        const double* V = t.value(v).data.data();
        std::vector<double> gq(lq * d, 0.0), gk(lk * d, 0.0), gv(lk * dv, 0.0), dp(lk);
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < lq; ++i) {
            const double* p = probs.data() + (h * lq + i) * lk;
            double dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
              dp[j] = 0.0;
              if (!allowed[i * lk + j]) continue;
              for (std::size_t e = 0; e < dvh; ++e) {
                const double go = g[i * dv + h * dvh + e];
                gv[j * dv + h * dvh + e] += p[j] * go;
                dp[j] += go * V[j * dv + h * dvh + e];
              }
              dot += p[j] * dp[j];
            }
            for (std::size_t j = 0; j < lk; ++j) {
              if (!allowed[i * lk + j]) continue;
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              for (std::size_t e = 0; e < dh; ++e) {
                gq[i * d + h * dh + e] += ds * K[j * d + h * dh + e];
                gk[j * d + h * dh + e] += ds * Q[i * d + h * dh + e];
              }
            }
          }
        auto add_to = [&t](Var target, const std::vector<double>& src) {
          if (!t.requires_grad(target)) return;
          auto& dst = t.grad_buffer(target);
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        add_to(q, gq);
        add_to(k, gk);
        add_to(v, gv);
      });
}

}  // namespace dfi
