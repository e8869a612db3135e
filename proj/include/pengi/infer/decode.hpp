#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/ops.hpp"
#include "pengi/model/pengi.hpp"

namespace pengi::infer {

using model::Prefix;
using model::Tokenizer;

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // generated tokens, EOS excluded
  double logprob = 0.0;         // includes the EOS step when finished
  bool finished = false;
  double score = 0.0;           // logprob / length^alpha

  /// Scored length: generated tokens plus the EOS step.
  std::size_t length() const { return tokens.size() + (finished ? 1 : 0); }
};

/// Next-token log-probabilities for a batch of partial outputs (tokens after
/// BOS). Row i has one entry per vocabulary item.
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>&)>;

struct DecodeOptions {
  std::size_t beam = 5;
  std::size_t max_len = 24;
  double alpha = 0.6;
};

inline double length_normalized(double logprob, std::size_t length, double alpha) {
  if (alpha == 0.0 || length == 0) return logprob;
  return logprob / std::pow(static_cast<double>(length), alpha);
}

/// Tokens that may never be generated.
inline bool blocked(TokenId id) { return id == Tokenizer::kPad || id == Tokenizer::kBos || id == Tokenizer::kUnk; }

/// One beam search pass of fixed width. Finished hypotheses stay in the beam
/// with a fixed score and compete with live ones on raw log-probability.
/// Ranking of the final beam uses logprob / length^alpha. Ties go to the
/// earlier beam, then the lower token id, so width 1 is exactly greedy.
inline std::vector<BeamHypothesis> beam_pass(const StepScorer& scorer, const DecodeOptions& o) {
  if (o.beam == 0) throw ConfigError("inference.beam must be at least 1");
  if (o.max_len == 0) throw ConfigError("inference.max_len must be at least 1");
  std::vector<BeamHypothesis> beams(1);
  for (std::size_t step = 0; step < o.max_len; ++step) {
    std::vector<std::vector<TokenId>> live;
    std::vector<std::size_t> live_index;
    for (std::size_t b = 0; b < beams.size(); ++b)
      if (!beams[b].finished) {
        live.push_back(beams[b].tokens);
        live_index.push_back(b);
      }
    if (live.empty()) break;
    const auto logp = scorer(live);
    if (logp.size() != live.size()) throw DimensionError("beam_search: scorer returned the wrong batch size");

    struct Cand {
      double lp;
      std::size_t beam;
      TokenId token;  // kPad marks "keep finished beam as is"
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beams.size(); ++b)
      if (beams[b].finished) cands.push_back({beams[b].logprob, b, Tokenizer::kPad});
    for (std::size_t i = 0; i < live.size(); ++i) {
      const std::size_t b = live_index[i];
      for (std::size_t v = 0; v < logp[i].size(); ++v) {
        if (blocked(TokenId(v))) continue;
        const double lp = beams[b].logprob + logp[i][v];
        if (!std::isfinite(lp)) continue;
        cands.push_back({lp, b, TokenId(v)});
      }
    }
    if (cands.empty()) break;
    const std::size_t keep = std::min(o.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.lp != b.lp) return a.lp > b.lp;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<BeamHypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      BeamHypothesis h = beams[cands[c].beam];
      if (!h.finished) {
        h.logprob = cands[c].lp;
        if (cands[c].token == Tokenizer::kEos) {
          h.finished = true;
        } else {
          h.tokens.push_back(cands[c].token);
        }
      }
      next.push_back(std::move(h));
    }
    beams = std::move(next);
  }
  for (auto& h : beams) h.score = length_normalized(h.logprob, h.length(), o.alpha);
  std::stable_sort(beams.begin(), beams.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.score > b.score; });
  return beams;
}

/// Scorer that remembers every row it has produced.
inline StepScorer memoized(const StepScorer& scorer) {
  auto cache = std::make_shared<std::map<std::vector<TokenId>, std::vector<double>>>();
  return [scorer, cache](const std::vector<std::vector<TokenId>>& seqs) {
    std::vector<std::vector<TokenId>> missing;
    for (const auto& s : seqs)
      if (!cache->count(s) && std::find(missing.begin(), missing.end(), s) == missing.end()) missing.push_back(s);
    if (!missing.empty()) {
      auto rows = scorer(missing);
      if (rows.size() != missing.size()) throw DimensionError("beam_search: scorer returned the wrong batch size");
      for (std::size_t i = 0; i < missing.size(); ++i) (*cache)[missing[i]] = std::move(rows[i]);
    }
    std::vector<std::vector<double>> out;
    for (const auto& s : seqs) out.push_back(cache->at(s));
    return out;
  };
}

/// Beam search of width w returning the best `w` distinct hypotheses found by
/// passes of every width 1..w. A single pass can lose a hypothesis that a
/// narrower pass keeps; pooling makes the top score non-decreasing in w.
/// The passes share scorer calls through a cache.
inline std::vector<BeamHypothesis> beam_search(const StepScorer& scorer, const DecodeOptions& o) {
  if (o.beam == 0) throw ConfigError("inference.beam must be at least 1");
  const StepScorer cached = memoized(scorer);
  std::vector<BeamHypothesis> pool;
  for (std::size_t w = 1; w <= o.beam; ++w) {
    for (auto& h : beam_pass(cached, {w, o.max_len, o.alpha})) {
      const bool seen = std::any_of(pool.begin(), pool.end(), [&h](const BeamHypothesis& p) {
        return p.tokens == h.tokens && p.finished == h.finished;
      });
      if (!seen) pool.push_back(std::move(h));
    }
  }
  std::stable_sort(pool.begin(), pool.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.score > b.score; });
  if (pool.size() > o.beam) pool.resize(o.beam);
  return pool;
}

/// Argmax decoding; ties go to the lowest token id.
inline BeamHypothesis greedy_decode(const StepScorer& scorer, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("inference.max_len must be at least 1");
  BeamHypothesis h;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto logp = scorer({h.tokens}).at(0);
    std::size_t best = logp.size();
    for (std::size_t v = 0; v < logp.size(); ++v) {
      if (blocked(TokenId(v)) || !std::isfinite(logp[v])) continue;
      if (best == logp.size() || logp[v] > logp[best]) best = v;
    }
    if (best == logp.size()) break;
    h.logprob += logp[best];
    if (TokenId(best) == Tokenizer::kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(TokenId(best));
  }
  h.score = h.logprob;
  return h;
}

/// Log-softmax over each requested row of a logits matrix.
template <class T>
std::vector<double> log_softmax_row_of(const Tensor<T>& logits, std::size_t r) {
  const auto row = logits.row(r);
  double m = -std::numeric_limits<double>::infinity();
  for (T v : row) m = std::max(m, static_cast<double>(v));
  double z = 0.0;
  for (T v : row) z += std::exp(static_cast<double>(v) - m);
  const double lse = m + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = static_cast<double>(row[j]) - lse;
  return out;
}

/// Packed forward of [prefix; BOS; tokens] for several token lists sharing one
/// prefix. Returns the logits with the row offset of each sequence.
template <class T>
std::pair<Tensor<T>, std::vector<std::size_t>> packed_logits(model::CausalLM<T>& lm, const Tensor<T>& prefix,
                                                             const std::vector<std::vector<TokenId>>& seqs) {
  if (prefix.cols() != lm.width()) throw DimensionError("decode: prefix width does not match LM");
  Tape<T> tp;
  std::vector<TokenId> all;
  for (const auto& s : seqs) {
    all.push_back(Tokenizer::kBos);
    all.insert(all.end(), s.begin(), s.end());
  }
  Var<T> emb = lm.embed(tp, all);
  Var<T> pre = tp.constant_ref(prefix);
  std::vector<Var<T>> parts;
  std::vector<std::size_t> segments, offsets;
  std::size_t at = 0, row = 0;
  for (const auto& s : seqs) {
    const std::size_t n = prefix.rows() + s.size() + 1;
    if (n > lm.context) {
      throw LengthError("decode: " + std::to_string(n) + " positions exceed LM context " + std::to_string(lm.context));
    }
    parts.push_back(pre);
    parts.push_back(slice_rows(emb, at, s.size() + 1));
    at += s.size() + 1;
    segments.push_back(n);
    offsets.push_back(row);
    row += n;
  }
  return {lm.logits(concat_rows(std::span<const Var<T>>(parts)), segments).value(), offsets};
}

/// Scorer for a fixed prefix under the model's frozen LM.
template <class T>
StepScorer lm_scorer(model::CausalLM<T>& lm, const Tensor<T>& prefix) {
  return [&lm, &prefix](const std::vector<std::vector<TokenId>>& seqs) {
    auto [logits, offsets] = packed_logits(lm, prefix, seqs);
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < seqs.size(); ++i)
      out.push_back(log_softmax_row_of(logits, offsets[i] + prefix.rows() + seqs[i].size()));
    return out;
  };
}

/// Most decoding steps that fit the LM context: after s generated tokens the
/// input is prefix + BOS + s rows.
template <class T>
std::size_t max_output_tokens(const model::CausalLM<T>& lm, const Prefix<T>& prefix, std::size_t wanted) {
  if (prefix.length() + 1 > lm.context) throw LengthError("decode: prefix leaves no room in the LM context");
  return std::min(wanted, lm.context - prefix.length());
}

struct Generation {
  std::string text;
  std::vector<TokenId> tokens;
  double logprob = 0.0;
  double score = 0.0;
  bool finished = false;
};

/// Beam search (or greedy when `greedy`) from a prefix; returns the top hypothesis as text.
template <class T>
Generation generate(model::PengiModel<T>& m, const Prefix<T>& prefix, const DecodeOptions& o, bool greedy = false) {
  const StepScorer scorer = lm_scorer(m.lm, prefix.rows);
  const std::size_t max_len = max_output_tokens(m.lm, prefix, o.max_len);
  const BeamHypothesis h = greedy ? greedy_decode(scorer, max_len) : beam_search(scorer, {o.beam, max_len, o.alpha}).front();
  return {m.tokenizer.decode(h.tokens), h.tokens, h.logprob, h.score, h.finished};
}

}  // namespace pengi::infer
