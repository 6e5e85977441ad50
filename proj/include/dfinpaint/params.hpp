// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dfinpaint/rng.hpp"
#include "dfinpaint/tensor.hpp"

namespace dfi {

/// Named learnable arrays. Iteration order (by name) is stable, which fixes
/// both optimizer bookkeeping and checkpoint layout.
class ParamStore {
 public:
  // weights ~ U(-s, s), s = 1 / sqrt(fan_in)
  Tensor& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return add_range(name, std::move(shape), -s, s, rng);
  }

  Tensor& add_range(const std::string& name, Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return insert(name, std::move(t));
  }

  Tensor& add_constant(const std::string& name, Shape shape, double value) {
    return insert(name, Tensor(std::move(shape), value));
  }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ParameterError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ParameterError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.contains(name); }

  const std::map<std::string, Tensor>& all() const { return params_; }

  std::vector<Tensor*> pointers() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : params_) out.push_back(&t);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.grad.clear();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // Replaces values from another store with identical names and shapes.
  void assign(const std::map<std::string, Tensor>& values) {
    for (auto& [name, t] : params_) {
      auto it = values.find(name);
      if (it == values.end()) throw ParameterError("checkpoint lacks parameter '" + name + "'");
      if (it->second.shape != t.shape) {
        throw DimensionError("parameter '" + name + "' has shape " + to_string(t.shape) +
                             ", checkpoint has " + to_string(it->second.shape));
      }
      t.data = it->second.data;
    }
    if (values.size() != params_.size()) {
      throw ParameterError("checkpoint holds parameters this model does not define");
    }
  }

 private:
  Tensor& insert(const std::string& name, Tensor t) {
    t.requires_grad = true;
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw ParameterError("duplicate parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Tensor> params_;
};

// How a module reaches its parameters on a given tape: trainable leaves, or
// frozen constants when the owning network is not being optimized.
struct Binding {
  Tape& tape;
  ParamStore& store;
  bool trainable = true;

  Var operator()(const std::string& name) const {
    Tensor& t = store.get(name);
    return trainable ? tape.leaf(t) : tape.frozen(t);
  }
};

// ---- layer builders ------------------------------------------------------

inline void add_conv(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                     std::size_t kernel, Rng& rng) {
  store.add_uniform(prefix + ".w", Shape{out, in, kernel, kernel}, in * kernel * kernel, rng);
  store.add_constant(prefix + ".b", Shape{out}, 0.0);
}

inline void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       Rng& rng) {
  store.add_uniform(prefix + ".w", Shape{in, out}, in, rng);
  store.add_constant(prefix + ".b", Shape{out}, 0.0);
}

inline void add_norm(ParamStore& store, const std::string& prefix, std::size_t dim) {
  store.add_constant(prefix + ".gamma", Shape{dim}, 1.0);
  store.add_constant(prefix + ".beta", Shape{dim}, 0.0);
}

inline Var apply_linear(const Binding& p, const std::string& prefix, Var x) {
  return linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

inline Var apply_conv(const Binding& p, const std::string& prefix, Var x, std::size_t stride,
                      std::size_t pad) {
  return conv2d(x, p(prefix + ".w"), p(prefix + ".b"), stride, pad);
}

inline Var apply_layer_norm(const Binding& p, const std::string& prefix, Var x) {
  return layer_norm_rows(x, p(prefix + ".gamma"), p(prefix + ".beta"));
}

inline void add_attention(ParamStore& store, const std::string& prefix, std::size_t dim, Rng& rng) {
  add_linear(store, prefix + ".q", dim, dim, rng);
  add_linear(store, prefix + ".k", dim, dim, rng);
  add_linear(store, prefix + ".v", dim, dim, rng);
  add_linear(store, prefix + ".o", dim, dim, rng);
}

// Projected multi-head attention of `queries` over `context`.
inline Var apply_attention(const Binding& p, const std::string& prefix, Var queries, Var context,
                           std::span<const std::uint8_t> key_mask, std::size_t heads, bool causal) {
  Var q = apply_linear(p, prefix + ".q", queries);
  Var k = apply_linear(p, prefix + ".k", context);
  Var v = apply_linear(p, prefix + ".v", context);
  return apply_linear(p, prefix + ".o", masked_attention(q, k, v, key_mask, heads, causal));
}

}  // namespace dfi
