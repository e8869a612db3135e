#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pengi/core/optim.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/networks.hpp"
#include "pengi/model/tokenizer.hpp"

namespace pengi::model {

struct LmPretrainOptions {
  std::size_t steps = 400;
  std::size_t batch = 32;
  AdamOptions adam{.lr = 3e-3, .warmup_steps = 40};
  std::uint64_t seed = 0;
};

struct LmPretrainReport {
  std::size_t steps = 0;
  double final_train_loss = 0.0;
  double heldout_loss = 0.0;      // mean nats per token
  double unigram_loss = 0.0;      // add-one unigram baseline on the same tokens
  double heldout_perplexity() const { return std::exp(heldout_loss); }
  double unigram_perplexity() const { return std::exp(unigram_loss); }
};

/// A corpus line is either plain text or "context<TAB>text". Context tokens
/// precede BOS and are read but never predicted.
inline constexpr char kContextSeparator = '\t';

struct LmSequence {
  std::vector<TokenId> tokens;  // context, BOS, words, EOS
  std::size_t context = 0;      // number of leading context tokens

  std::size_t predicted() const { return tokens.size() - context - 1; }
};

/// Splits a corpus line into (context, text); context is empty for plain lines.
inline std::pair<std::string, std::string> split_lm_line(const std::string& line) {
  const auto tab = line.find(kContextSeparator);
  if (tab == std::string::npos) return {"", line};
  return {line.substr(0, tab), line.substr(tab + 1)};
}

/// Every text fragment of the corpus, for vocabulary building.
inline std::vector<std::string> lm_line_texts(std::span<const std::string> lines) {
  std::vector<std::string> out;
  for (const auto& l : lines) {
    auto [ctx, text] = split_lm_line(l);
    if (!ctx.empty()) out.push_back(ctx);
    out.push_back(text);
  }
  return out;
}

inline std::vector<LmSequence> lm_sequences(const Tokenizer& tok, std::span<const std::string> lines) {
  std::vector<LmSequence> out;
  for (const auto& l : lines) {
    auto [ctx, text] = split_lm_line(l);
    LmSequence s;
    s.tokens = tok.encode(ctx);
    s.context = s.tokens.size();
    s.tokens.push_back(Tokenizer::kBos);
    const auto ids = tok.encode(text);
    s.tokens.insert(s.tokens.end(), ids.begin(), ids.end());
    s.tokens.push_back(Tokenizer::kEos);
    out.push_back(std::move(s));
  }
  return out;
}

/// Next-token loss over a batch, every predicted token weighted equally;
/// context positions carry no loss.
template <class T>
Var<T> lm_batch_loss(Tape<T>& tp, CausalLM<T>& lm, std::span<const LmSequence* const> seqs) {
  std::vector<TokenId> inputs, targets;
  std::vector<std::size_t> segments;
  std::vector<bool> supervised;
  std::size_t n = 0;
  for (const auto* s : seqs) {
    inputs.insert(inputs.end(), s->tokens.begin(), s->tokens.end() - 1);
    targets.insert(targets.end(), s->tokens.begin() + 1, s->tokens.end());
    for (std::size_t i = 0; i + 1 < s->tokens.size(); ++i) supervised.push_back(i >= s->context);
    segments.push_back(s->tokens.size() - 1);
    n += s->predicted();
  }
  std::vector<T> w(targets.size(), T(0));
  for (std::size_t i = 0; i < w.size(); ++i)
    if (supervised[i]) w[i] = T(1) / T(n);
  Var<T> logits = lm.logits(lm.embed(tp, inputs), segments);
  return weighted_cross_entropy(logits, std::span<const TokenId>(targets), std::span<const T>(w));
}

/// Mean next-token negative log-likelihood (nats per predicted token).
template <class T>
double lm_mean_nll(CausalLM<T>& lm, const std::vector<LmSequence>& seqs) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < seqs.size(); start += 64) {
    std::vector<const LmSequence*> chunk;
    std::size_t n = 0;
    for (std::size_t i = start; i < std::min(seqs.size(), start + 64); ++i) {
      chunk.push_back(&seqs[i]);
      n += seqs[i].predicted();
    }
    Tape<T> tp;
    total += static_cast<double>(lm_batch_loss<T>(tp, lm, chunk).value().item()) * static_cast<double>(n);
    tokens += n;
  }
  return total / static_cast<double>(tokens);
}

/// Cross-entropy of `eval` targets under add-one smoothed unigram counts of `train` targets.
inline double unigram_loss(const std::vector<LmSequence>& train, const std::vector<LmSequence>& eval,
                           std::size_t vocab) {
  std::vector<double> counts(vocab, 1.0);
  double total = static_cast<double>(vocab);
  for (const auto& s : train)
    for (std::size_t i = s.context + 1; i < s.tokens.size(); ++i) {
      counts[s.tokens[i]] += 1.0;
      total += 1.0;
    }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& s : eval)
    for (std::size_t i = s.context + 1; i < s.tokens.size(); ++i) {
      nll -= std::log(counts[s.tokens[i]] / total);
      ++n;
    }
  return nll / static_cast<double>(n);
}

/// Trains every LM parameter on the text corpus, then freezes the LM.
template <class T>
LmPretrainReport pretrain_lm(CausalLM<T>& lm, const Tokenizer& tok, std::span<const std::string> train_lines,
                             std::span<const std::string> heldout_lines, const LmPretrainOptions& o) {
  if (train_lines.empty()) throw DataError("pretrain_lm: empty corpus");
  if (train_lines.size() < o.batch) {
    throw DataError("pretrain_lm: corpus of " + std::to_string(train_lines.size()) + " lines is smaller than one batch of " +
                    std::to_string(o.batch));
  }
  if (lm.vocab() != tok.size()) throw DimensionError("pretrain_lm: LM vocabulary does not match tokenizer");
  const auto train = lm_sequences(tok, train_lines);
  const auto heldout = lm_sequences(tok, heldout_lines.empty() ? train_lines : heldout_lines);
  for (const auto& s : train)
    if (s.tokens.size() - 1 > lm.context) throw LengthError("pretrain_lm: line longer than LM context");

  std::vector<Tensor<T>*> params;
  lm.visit("", [&params](const std::string&, Tensor<T>& t) {
    t.set_requires_grad(true);
    params.push_back(&t);
  });
  lm.frozen = false;
  Adam<T> opt(params, o.adam);
  Rng rng(o.seed, "lm_batches");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  LmPretrainReport rep;
  for (std::size_t step = 0; step < o.steps; ++step) {
    std::vector<const LmSequence*> batch;
    while (batch.size() < o.batch) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
    }
    Tape<T> tp;
    Var<T> loss = lm_batch_loss<T>(tp, lm, batch);
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv)) throw NumericError("pretrain_lm: non-finite loss at step " + std::to_string(step));
    tp.backward(loss);
    opt.step();
    rep.final_train_loss = lv;
    rep.steps = step + 1;
  }
  lm.visit("", [](const std::string&, Tensor<T>& t) { t.set_requires_grad(false); });
  lm.frozen = true;
  rep.heldout_loss = lm_mean_nll(lm, heldout);
  rep.unigram_loss = unigram_loss(train, heldout, tok.size());
  return rep;
}

}  // namespace pengi::model
