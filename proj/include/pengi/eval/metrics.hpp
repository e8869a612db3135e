#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pengi/core/error.hpp"

namespace pengi::eval {

template <class A>
double accuracy(std::span<const A> preds, std::span<const A> golds) {
  if (preds.size() != golds.size()) {
    throw ContractError("accuracy: " + std::to_string(preds.size()) + " predictions for " + std::to_string(golds.size()) +
                        " labels");
  }
  if (preds.empty()) throw DataError("accuracy: no examples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

inline double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
  return accuracy<std::string>(preds, golds);
}

/// Average precision of one ranking: mean over positives of the precision at
/// their rank. Examples are ranked by score, ties in input order.
inline double average_precision(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ContractError("average_precision: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!positive[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

/// Mean over classes of average precision. scores[i][c] is the score of
/// example i for class c; golds[i] holds the class indices that apply.
/// Classes without any positive example are left out of the mean.
inline double map_score(const std::vector<std::vector<double>>& scores, const std::vector<std::set<std::size_t>>& golds) {
  if (scores.size() != golds.size()) throw ContractError("map_score: scores and labels differ in length");
  if (scores.empty()) throw DataError("map_score: no examples");
  const std::size_t classes = scores.front().size();
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<bool> pos;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != classes) throw ContractError("map_score: ragged score matrix");
      s.push_back(scores[i][c]);
      pos.push_back(golds[i].count(c) > 0);
    }
    if (std::find(pos.begin(), pos.end(), true) == pos.end()) continue;
    sum += average_precision(s, pos);
    ++used;
  }
  if (used == 0) throw DataError("map_score: no class has a positive example");
  return sum / static_cast<double>(used);
}

/// Fraction of queries with at least one relevant id among the first k ranked.
template <class Id>
double recall_at_k(const std::vector<std::vector<Id>>& ranked, const std::vector<std::set<Id>>& relevant, std::size_t k) {
  if (ranked.size() != relevant.size()) throw ContractError("recall_at_k: rankings and relevance sets differ in length");
  if (ranked.empty()) throw DataError("recall_at_k: no queries");
  if (k == 0) throw ContractError("recall_at_k: k must be at least 1");
  std::size_t hit = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    const std::size_t n = std::min(k, ranked[q].size());
    for (std::size_t i = 0; i < n; ++i)
      if (relevant[q].count(ranked[q][i])) {
        ++hit;
        break;
      }
  }
  return static_cast<double>(hit) / static_cast<double>(ranked.size());
}

// ---- BLEU -----------------------------------------------------------------

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

using Ngram = std::vector<std::string>;

inline std::map<Ngram, std::size_t> ngram_counts(const std::vector<std::string>& w, std::size_t n) {
  std::map<Ngram, std::size_t> c;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[Ngram(w.begin() + i, w.begin() + i + n)];
  return c;
}

struct Precision {
  std::size_t clipped = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total); }
};

/// Modified n-gram precision: hypothesis counts clipped by the maximum count
/// in any single reference.
inline Precision modified_precision(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs,
                                    std::size_t n) {
  Precision p;
  std::map<Ngram, std::size_t> max_ref;
  for (const auto& r : refs)
    for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
  for (const auto& [g, c] : ngram_counts(hyp, n)) {
    p.total += c;
    auto it = max_ref.find(g);
    p.clipped += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
  }
  return p;
}

/// Reference length closest to the hypothesis length (shorter on ties).
inline std::size_t closest_ref_length(std::size_t hyp_len, const std::vector<std::vector<std::string>>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t l) { return l > hyp_len ? l - hyp_len : hyp_len - l; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

namespace detail {

inline double bleu_from(const std::vector<Precision>& p, std::size_t hyp_len, std::size_t ref_len, bool smooth) {
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t m = 0; m < p.size(); ++m) {
    double num = static_cast<double>(p[m].clipped), den = static_cast<double>(p[m].total);
    if (smooth && m > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_sum / static_cast<double>(p.size()));
}

inline void check_order(std::size_t n) {
  if (n < 1 || n > 4) throw ContractError("bleu: n must be in 1..4, got " + std::to_string(n));
}

}  // namespace detail

/// Corpus BLEU-n with uniform weights, clipped counts and brevity penalty;
/// unsmoothed.
inline double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::vector<std::string>>& refs,
                          std::size_t n) {
  detail::check_order(n);
  if (hyps.size() != refs.size()) throw ContractError("bleu: hypotheses and reference lists differ in length");
  std::vector<Precision> p(n);
  std::size_t c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = words(hyps[i]);
    std::vector<std::vector<std::string>> rw;
    for (const auto& s : refs[i]) rw.push_back(words(s));
    if (rw.empty()) throw ContractError("bleu: example " + std::to_string(i) + " has no reference");
    for (std::size_t m = 0; m < n; ++m) {
      const auto q = modified_precision(h, rw, m + 1);
      p[m].clipped += q.clipped;
      p[m].total += q.total;
    }
    c += h.size();
    r += closest_ref_length(h.size(), rw);
  }
  return detail::bleu_from(p, c, r, false);
}

/// Single-sentence BLEU-n; unsmoothed, so it equals corpus BLEU over one example.
inline double bleu_n(const std::string& hyp, const std::vector<std::string>& refs, std::size_t n) {
  return corpus_bleu({hyp}, {refs}, n);
}

/// Sentence BLEU-n with add-one smoothing of the n > 1 precisions.
inline double sentence_bleu(const std::string& hyp, const std::vector<std::string>& refs, std::size_t n) {
  detail::check_order(n);
  const auto h = words(hyp);
  std::vector<std::vector<std::string>> rw;
  for (const auto& s : refs) rw.push_back(words(s));
  if (rw.empty()) throw ContractError("bleu: no reference");
  std::vector<Precision> p;
  for (std::size_t m = 1; m <= n; ++m) p.push_back(modified_precision(h, rw, m));
  return detail::bleu_from(p, h.size(), closest_ref_length(h.size(), rw), true);
}

}  // namespace pengi::eval
