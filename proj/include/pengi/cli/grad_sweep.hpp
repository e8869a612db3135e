#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pengi/core/attention.hpp"
#include "pengi/core/grad_check.hpp"
#include "pengi/core/ops.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/pengi.hpp"
#include "pengi/train/dataset.hpp"
#include "pengi/train/loss.hpp"

namespace pengi::cli {

struct GradRow {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return error <= tolerance; }
};

inline nlohmann::json to_json(const GradRow& r) {
  return {{"name", r.name}, {"error", r.error}, {"tolerance", r.tolerance}, {"pass", r.pass()}};
}

namespace detail {

using D = double;

inline Tensor<D> rand(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  Tensor<D> t = Tensor<D>::matrix(r, c);
  for (auto& v : t.data()) v = rng.normal() * s;
  return t;
}

}  // namespace detail

/// Central-difference check of every differentiable op at 64-bit, then a
/// composed MLP and the full captioning objective on a one-example batch.
inline std::vector<GradRow> grad_check_sweep(std::uint64_t seed) {
  using detail::D;
  using detail::rand;
  Rng rng(seed, "grad_check");
  std::vector<GradRow> rows;
  const D eps = 1e-5;
  constexpr double kOp = 1e-6, kMlp = 1e-4, kLoss = 1e-3;

  // Output reduced with fixed random weights so no op invariance hides an error.
  auto op = [&](const std::string& name, std::function<Var<D>(Tape<D>&, Var<D>)> f, const Tensor<D>& x) {
    Tensor<D> w;
    {
      Tape<D> tp;
      const auto out = f(tp, tp.constant(x)).value();
      w = rand(out.rows(), out.cols(), rng);
    }
    auto g = [&](Tape<D>& tp, Var<D> v) { return sum(mul(f(tp, v), tp.constant(w))); };
    rows.push_back({name, grad_check<D>(g, x, eps), kOp});
  };

  const auto o35 = rand(3, 5, rng);
  op("add", [&](Tape<D>& tp, Var<D> x) { return add(x, tp.constant(o35)); }, rand(3, 5, rng));
  op("mul", [&](Tape<D>& tp, Var<D> x) { return mul(x, tp.constant(o35)); }, rand(3, 5, rng));
  op("mul_self", [](Tape<D>&, Var<D> x) { return mul(x, x); }, rand(3, 5, rng));
  op("scale", [](Tape<D>&, Var<D> x) { return scale(x, 0.37); }, rand(2, 3, rng));
  op("exp", [](Tape<D>&, Var<D> x) { return exp(x); }, rand(2, 3, rng));
  op("gelu", [](Tape<D>&, Var<D> x) { return gelu(x); }, rand(4, 6, rng, 2.0));
  op("relu", [](Tape<D>&, Var<D> x) { return relu(x); }, rand(3, 3, rng));
  const auto x43 = rand(4, 3, rng);
  op("add_bias.bias", [&](Tape<D>& tp, Var<D> b) { return add_bias(tp.constant(x43), b); }, rand(1, 3, rng));
  op("add_bias.input", [&](Tape<D>& tp, Var<D> v) { return add_bias(v, tp.constant(Tensor<D>::matrix(1, 3, 0.5))); }, x43);
  op("scale_by.scalar", [&](Tape<D>& tp, Var<D> s) { return scale_by(tp.constant(x43), s); }, Tensor<D>::scalar(1.7));
  op("scale_by.input", [&](Tape<D>& tp, Var<D> v) { return scale_by(v, tp.constant(Tensor<D>::scalar(0.6))); }, x43);
  const auto b35 = rand(3, 5, rng), b53 = rand(5, 3, rng);
  op("matmul.a", [&](Tape<D>& tp, Var<D> a) { return matmul(a, tp.constant(b35)); }, rand(4, 3, rng));
  op("matmul.b", [&](Tape<D>& tp, Var<D> b) { return matmul(tp.constant(x43), b); }, b35);
  op("matmul_nt.a", [&](Tape<D>& tp, Var<D> a) { return matmul_nt(a, tp.constant(b53)); }, rand(4, 3, rng));
  op("matmul_nt.b", [&](Tape<D>& tp, Var<D> b) { return matmul_nt(tp.constant(x43), b); }, b53);
  op("pairwise_dot.a", [&](Tape<D>& tp, Var<D> a) { return pairwise_dot(a, tp.constant(b53)); }, rand(4, 3, rng));
  op("pairwise_dot.b", [&](Tape<D>& tp, Var<D> b) { return pairwise_dot(tp.constant(x43), b); }, b53);
  op("transpose", [](Tape<D>&, Var<D> a) { return transpose(a); }, rand(4, 3, rng));
  const auto gamma = rand(1, 6, rng), beta = rand(1, 6, rng), x36 = rand(3, 6, rng, 2.0);
  op("layer_norm.input", [&](Tape<D>& tp, Var<D> v) { return layer_norm(v, tp.constant(gamma), tp.constant(beta)); }, x36);
  op("layer_norm.gain", [&](Tape<D>& tp, Var<D> g) { return layer_norm(tp.constant(x36), g, tp.constant(beta)); }, gamma);
  op("layer_norm.bias", [&](Tape<D>& tp, Var<D> b) { return layer_norm(tp.constant(x36), tp.constant(gamma), b); }, beta);
  op("l2_normalize_rows", [](Tape<D>&, Var<D> v) { return l2_normalize_rows(v); }, x36);
  op("softmax_rows", [](Tape<D>&, Var<D> v) { return softmax_rows(v); }, x36);
  const std::vector<TokenId> ids{2, 0, 2, 4};
  op("embedding_lookup", [&](Tape<D>&, Var<D> t) { return embedding_lookup(t, std::span<const TokenId>(ids)); },
     rand(5, 3, rng));
  const auto o24 = rand(2, 4, rng);
  op("concat_rows", [&](Tape<D>& tp, Var<D> x) { return concat_rows({tp.constant(o24), x, x}); }, rand(3, 4, rng));
  op("slice_rows", [](Tape<D>&, Var<D> x) { return slice_rows(x, 1, 2); }, rand(4, 3, rng));
  op("reshape", [](Tape<D>&, Var<D> x) { return reshape(x, 6, 2); }, rand(2, 6, rng));
  const std::vector<std::size_t> segs{3, 1, 2};
  op("mean_pool", [&](Tape<D>&, Var<D> x) { return mean_pool(x, std::span<const std::size_t>(segs)); }, rand(6, 3, rng));
  op("sum", [](Tape<D>&, Var<D> x) { return sum(x); }, rand(3, 2, rng));
  {
    const std::vector<TokenId> targets{0, 3, 2, 1};
    const std::vector<bool> mask{true, true, false, true};
    auto f = [&](Tape<D>&, Var<D> x) { return cross_entropy(x, targets, mask); };
    rows.push_back({"cross_entropy", grad_check<D>(f, rand(4, 5, rng, 2.0), eps), kOp});
    const std::vector<D> weights{0.5, 0.0, 1.0, 0.25};
    auto g = [&](Tape<D>&, Var<D> x) {
      return weighted_cross_entropy(x, std::span<const TokenId>(targets), std::span<const D>(weights));
    };
    rows.push_back({"weighted_cross_entropy", grad_check<D>(g, rand(4, 5, rng, 2.0), eps), kOp});
  }
  {
    const std::vector<std::size_t> as{3, 4};
    const auto q = rand(7, 4, rng), k = rand(7, 4, rng), v = rand(7, 4, rng);
    for (bool causal : {true, false}) {
      const std::string tag = causal ? "attention.causal" : "attention.bidirectional";
      auto att = [&, causal](Var<D> qq, Var<D> kk, Var<D> vv) {
        return attention(qq, kk, vv, 2, std::span<const std::size_t>(as), causal);
      };
      op(tag + ".q", [&](Tape<D>& tp, Var<D> x) { return att(x, tp.constant(k), tp.constant(v)); }, q);
      op(tag + ".k", [&](Tape<D>& tp, Var<D> x) { return att(tp.constant(q), x, tp.constant(v)); }, k);
      op(tag + ".v", [&](Tape<D>& tp, Var<D> x) { return att(tp.constant(q), tp.constant(k), x); }, v);
    }
  }

  // Two-layer MLP with cross-entropy.
  {
    auto w1 = rand(4, 8, rng, 0.5), b1 = rand(1, 8, rng, 0.1), w2 = rand(8, 3, rng, 0.5);
    const std::vector<TokenId> labels{0, 2, 1, 1, 2};
    const std::vector<bool> mask(5, true);
    const auto x = rand(5, 4, rng);
    auto net = [&](Tape<D>& tp, Var<D> in, Var<D> W1) {
      Var<D> h = gelu(add_bias(matmul(in, W1), tp.constant(b1)));
      return cross_entropy(matmul(h, tp.constant(w2)), labels, mask);
    };
    rows.push_back({"mlp.input", grad_check<D>([&](Tape<D>& tp, Var<D> in) { return net(tp, in, tp.constant(w1)); }, x, eps),
                    kMlp});
    rows.push_back({"mlp.weight", grad_check<D>([&](Tape<D>& tp, Var<D> W) { return net(tp, tp.constant(x), W); }, w1, eps),
                    kMlp});
  }

  // Full captioning objective over every trainable parameter.
  {
    model::ModelConfig c;
    c.d_lm = 16;
    c.lm_layers = 1;
    c.lm_heads = 2;
    c.lm_context = 24;
    c.d_embed = 8;
    c.n_mels = 6;
    c.audio_width = 8;
    c.audio_layers = 1;
    c.audio_heads = 2;
    c.patch_frames = 2;
    c.max_patches = 8;
    c.text_width = 8;
    c.text_layers = 1;
    c.text_heads = 2;
    c.max_prompt_tokens = 8;
    c.mapper_layers = 1;
    c.mapper_heads = 2;
    c.prefix_k = 2;
    c.mlp_ratio = 2;
    c.max_caption_tokens = 8;
    const std::vector<std::string> texts{"generate audio caption", "a loud whistle blows"};
    model::PengiModel<D> m(c, model::Tokenizer::build(texts), seed);
    const auto x = rand(6, 6, rng);
    const auto cap = train::encode_caption(m.tokenizer, "a loud whistle blows", c.max_caption_tokens);
    auto loss = [&](Tape<D>& tp) {
      const Tensor<D>* mels[1] = {&x};
      const std::string prompts[1] = {"generate audio caption"};
      const std::vector<TokenId> caps[1] = {cap};
      return train::pengi_loss(m, tp, mels, prompts, caps);
    };
    const auto params = m.trainable().tensors();
    rows.push_back({"captioning_loss", grad_check_parameters<D>(loss, std::span<Tensor<D>* const>(params), eps, 6), kLoss});
  }
  return rows;
}

}  // namespace pengi::cli
