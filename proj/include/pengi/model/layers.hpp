#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/attention.hpp"
#include "pengi/core/ops.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi::model {

template <class T>
Tensor<T> normal_init(Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(rng.normal() * stddev);
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> const_init(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <class T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(normal_init<T>({in, out}, rng, 1.0 / std::sqrt(double(in)))), bias(const_init<T>({1, out}, T(0))) {}

  Var<T> operator()(Var<T> x) {
    auto& tp = x.tape();
    return add_bias(matmul(x, tp.parameter(weight)), tp.parameter(bias));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gain(const_init<T>({1, width}, T(1))), bias(const_init<T>({1, width}, T(0))) {}

  Var<T> operator()(Var<T> x) {
    auto& tp = x.tape();
    return layer_norm(x, tp.parameter(gain), tp.parameter(bias));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gain", gain);
    f(prefix + "bias", bias);
  }
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <class T>
struct TransformerBlock {
  std::size_t heads = 1;
  LayerNorm<T> ln_attn, ln_mlp;
  Linear<T> query, key, value, proj, fc_in, fc_out;

  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t n_heads, std::size_t mlp_ratio, Rng& rng)
      : heads(n_heads),
        ln_attn(width),
        ln_mlp(width),
        query(width, width, rng),
        key(width, width, rng),
        value(width, width, rng),
        proj(width, width, rng),
        fc_in(width, width * mlp_ratio, rng),
        fc_out(width * mlp_ratio, width, rng) {
    // Residual branches start small so a deep stack begins near identity.
    for (auto* w : {&proj.weight, &fc_out.weight})
      for (auto& v : w->data()) v *= T(0.5);
  }

  Var<T> operator()(Var<T> x, std::span<const std::size_t> segments, bool causal) {
    Var<T> h = ln_attn(x);
    Var<T> a = attention(query(h), key(h), value(h), heads, segments, causal);
    x = add(x, proj(a));
    Var<T> m = fc_out(gelu(fc_in(ln_mlp(x))));
    return add(x, m);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    ln_attn.visit(prefix + "ln_attn.", f);
    query.visit(prefix + "query.", f);
    key.visit(prefix + "key.", f);
    value.visit(prefix + "value.", f);
    proj.visit(prefix + "proj.", f);
    ln_mlp.visit(prefix + "ln_mlp.", f);
    fc_in.visit(prefix + "fc_in.", f);
    fc_out.visit(prefix + "fc_out.", f);
  }
};

template <class T>
struct TransformerStack {
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_final;

  TransformerStack() = default;
  TransformerStack(std::size_t depth, std::size_t width, std::size_t heads, std::size_t mlp_ratio, Rng& rng)
      : ln_final(width) {
    for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(width, heads, mlp_ratio, rng);
  }

  Var<T> operator()(Var<T> x, std::span<const std::size_t> segments, bool causal) {
    for (auto& b : blocks) x = b(x, segments, causal);
    return ln_final(x);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + "blocks." + std::to_string(i) + ".", f);
    ln_final.visit(prefix + "ln_final.", f);
  }
};

/// Positional rows 0..n-1 of every segment, stacked to match a packed batch.
template <class T>
Var<T> positions_for(Var<T> table, std::span<const std::size_t> segments) {
  std::vector<TokenId> ids;
  for (std::size_t n : segments) {
    if (n > table.rows()) {
      throw LengthError("sequence length " + std::to_string(n) + " exceeds positional table of " +
                        std::to_string(table.rows()));
    }
    for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>(i));
  }
  return embedding_lookup(table, std::span<const TokenId>(ids));
}

}  // namespace pengi::model
