#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/optim.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/layers.hpp"
#include "pengi/model/pengi.hpp"

namespace pengi::train {

/// Projections of both encoders into a shared space plus a learned
/// temperature stored as log tau.
template <class T>
struct ContrastiveHead {
  model::Linear<T> audio_proj;
  model::Linear<T> text_proj;
  Tensor<T> log_tau;

  ContrastiveHead() = default;
  ContrastiveHead(std::size_t d_embed, std::size_t d_shared, Rng& rng)
      : audio_proj(d_embed, d_shared, rng),
        text_proj(d_embed, d_shared, rng),
        log_tau(Tensor<T>::scalar(T(std::log(1.0 / 0.07)))) {
    log_tau.set_requires_grad(true);
  }

  T tau() const { return std::exp(log_tau.item()); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    audio_proj.visit(prefix + "audio_proj.", f);
    text_proj.visit(prefix + "text_proj.", f);
    f(prefix + "log_tau", log_tau);
  }
};

/// Similarity matrix C = tau * normalize(E_t) . normalize(E_a)^T, rows = texts.
template <class T>
Var<T> similarity_matrix(const Var<T>& e_text, const Var<T>& e_audio, const Var<T>& log_tau) {
  if (e_text.rows() != e_audio.rows()) throw DimensionError("contrastive: text and audio batch sizes differ");
  return scale_by(pairwise_dot(l2_normalize_rows(e_text), l2_normalize_rows(e_audio)), exp(log_tau));
}

/// 0.5 * (row-wise cross-entropy of C + row-wise cross-entropy of C^T), both
/// against the diagonal.
template <class T>
Var<T> contrastive_loss(const Var<T>& e_text, const Var<T>& e_audio, const Var<T>& log_tau) {
  const std::size_t n = e_text.rows();
  if (n < 2) throw DataError("contrastive: degenerate batch, need at least 2 pairs (got " + std::to_string(n) + ")");
  Var<T> c = similarity_matrix(e_text, e_audio, log_tau);
  std::vector<TokenId> diag(n);
  std::iota(diag.begin(), diag.end(), TokenId{0});
  const std::vector<bool> all(n, true);
  Var<T> l_text = cross_entropy(c, std::span<const TokenId>(diag), all);
  Var<T> l_audio = cross_entropy(transpose(c), std::span<const TokenId>(diag), all);
  return scale(add(l_text, l_audio), T(0.5));
}

struct ContrastivePair {
  std::size_t clip = 0;
  std::vector<TokenId> text;  // caption tokens, no BOS/EOS
  std::string key;            // caption text; pairs with equal keys never share a batch
};

struct ContrastiveOptions {
  std::size_t steps = 300;
  std::size_t batch = 16;
  std::size_t shared_dim = 512;
  AdamOptions adam{.lr = 1e-3, .warmup_steps = 30};
  std::uint64_t seed = 0;
};

struct ContrastiveReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t batch = 0;
  std::vector<double> losses;
};

/// Encoder outputs projected into the shared space for a list of pairs.
template <class T>
std::pair<Var<T>, Var<T>> contrastive_embeddings(Tape<T>& tp, model::PengiModel<T>& m, ContrastiveHead<T>& head,
                                                 std::span<const Tensor<T>> mels,
                                                 std::span<const ContrastivePair* const> pairs) {
  std::vector<const Tensor<T>*> xs;
  std::vector<std::vector<TokenId>> ts;
  for (const auto* p : pairs) {
    xs.push_back(&mels[p->clip]);
    ts.push_back(p->text);
  }
  Var<T> ea = head.audio_proj(m.audio(tp, xs));
  Var<T> et = head.text_proj(m.text(tp, ts));
  return {et, ea};
}

template <class T>
double contrastive_batch_loss(model::PengiModel<T>& m, ContrastiveHead<T>& head, std::span<const Tensor<T>> mels,
                              std::span<const ContrastivePair* const> pairs) {
  Tape<T> tp;
  auto [et, ea] = contrastive_embeddings(tp, m, head, mels, pairs);
  return static_cast<double>(contrastive_loss(et, ea, tp.parameter(head.log_tau)).value().item());
}

/// Fraction of text rows whose most similar audio column is its own pair.
template <class T>
double diagonal_argmax_rate(model::PengiModel<T>& m, ContrastiveHead<T>& head, std::span<const Tensor<T>> mels,
                            std::span<const ContrastivePair* const> pairs) {
  Tape<T> tp;
  auto [et, ea] = contrastive_embeddings(tp, m, head, mels, pairs);
  const Tensor<T> c = similarity_matrix(et, ea, tp.parameter(head.log_tau)).value();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c.cols(); ++j)
      if (c.at(i, j) > c.at(i, best)) best = j;
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(c.rows());
}

/// One pair per distinct key, chosen at random, for up to `batch` keys.
inline std::vector<std::size_t> sample_distinct(const std::vector<ContrastivePair>& pairs, std::size_t batch, Rng& rng) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].key].push_back(i);
  std::vector<const std::vector<std::size_t>*> g;
  for (const auto& [k, v] : groups) g.push_back(&v);
  rng.shuffle(g);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < g.size() && out.size() < batch; ++i) out.push_back((*g[i])[rng.below(g[i]->size())]);
  return out;
}

/// Trains both encoders and the head with the symmetric loss; afterwards the
/// model's freeze flags are re-applied, so the text encoder is frozen again.
template <class T>
ContrastiveReport contrastive_pretrain(model::PengiModel<T>& m, ContrastiveHead<T>& head, std::span<const Tensor<T>> mels,
                                       const std::vector<ContrastivePair>& pairs, const ContrastiveOptions& o) {
  std::vector<Tensor<T>*> params;
  auto take = [&params](const std::string&, Tensor<T>& t) {
    t.set_requires_grad(true);
    params.push_back(&t);
  };
  m.audio.visit("", take);
  m.text.visit("", take);
  head.visit("", take);
  Adam<T> opt(params, o.adam);
  Rng rng(o.seed, "contrastive_batches");
  ContrastiveReport rep;
  for (std::size_t step = 0; step < o.steps; ++step) {
    const auto idx = sample_distinct(pairs, o.batch, rng);
    if (idx.size() < 2) throw DataError("contrastive: degenerate batch, need at least 2 distinct captions");
    std::vector<const ContrastivePair*> batch;
    for (auto i : idx) batch.push_back(&pairs[i]);
    Tape<T> tp;
    auto [et, ea] = contrastive_embeddings(tp, m, head, mels, batch);
    Var<T> loss = contrastive_loss(et, ea, tp.parameter(head.log_tau));
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv)) throw NumericError("contrastive: non-finite loss at step " + std::to_string(step));
    if (step == 0) rep.initial_loss = lv;
    rep.losses.push_back(lv);
    rep.final_loss = lv;
    rep.batch = batch.size();
    tp.backward(loss);
    opt.step();
  }
  m.apply_freeze();
  return rep;
}

}  // namespace pengi::train
