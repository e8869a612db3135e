#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pengi/infer/decode.hpp"

namespace pengi::infer {

class CandidateError : public DataError {
 public:
  explicit CandidateError(const std::string& what) : DataError(what) {}
};

/// Predefined answer values for a close-ended task.
struct CandidateSet {
  std::vector<std::string> values;

  explicit CandidateSet(std::vector<std::string> v) : values(std::move(v)) {
    if (values.empty()) throw CandidateError("candidate set is empty");
    std::set<std::string> seen;
    for (const auto& c : values) {
      if (c.empty()) throw CandidateError("candidate set contains an empty value");
      if (!seen.insert(c).second) throw CandidateError("candidate '" + c + "' appears twice");
    }
  }
};

struct ClosedResult {
  std::vector<double> scores;
  std::size_t best = 0;
};

/// First index of the maximum; the deterministic tie rule for all selections.
inline std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Log-likelihood of each candidate (its tokens followed by EOS) after the
/// prefix and BOS. With `normalize` the sum is divided by the token count.
template <class T>
ClosedResult score_candidates_loglik(model::PengiModel<T>& m, const Prefix<T>& prefix,
                                     std::span<const std::string> candidates, bool normalize = true) {
  if (candidates.empty()) throw CandidateError("no candidates to score");
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& c : candidates) {
    auto ids = m.tokenizer.encode(c);
    if (ids.empty()) throw CandidateError("empty candidate string");
    ids.push_back(Tokenizer::kEos);
    seqs.push_back(std::move(ids));
  }
  // The scored input omits the trailing EOS: its row would predict past the end.
  std::vector<std::vector<TokenId>> inputs;
  for (const auto& s : seqs) inputs.emplace_back(s.begin(), s.end() - 1);
  auto [logits, offsets] = packed_logits(m.lm, prefix.rows, inputs);
  ClosedResult r;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < seqs[i].size(); ++j) {
      const auto lp = log_softmax_row_of(logits, offsets[i] + prefix.length() + j);
      total += lp[seqs[i][j]];
    }
    r.scores.push_back(normalize ? total / static_cast<double>(seqs[i].size()) : total);
  }
  r.best = argmax_first(r.scores);
  return r;
}

/// Maps texts to embedding rows [n x d].
using Embedder = std::function<Tensor<double>(std::span<const std::string>)>;

/// The model's own text encoder as the sentence embedder.
template <class T>
Embedder text_encoder_embedder(model::PengiModel<T>& m) {
  return [&m](std::span<const std::string> texts) {
    std::vector<std::vector<TokenId>> ids;
    for (const auto& t : texts) ids.push_back(m.encode_prompt(t));
    Tape<T> tp;
    return m.text(tp, ids).value().template cast<double>();
  };
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine: zero-length embedding");
  return d / std::sqrt(na * nb);
}

/// Cosine similarity of the generated text to each candidate; ties go to the
/// lowest candidate index.
inline ClosedResult text_match(const std::string& output, std::span<const std::string> candidates, const Embedder& embed) {
  if (output.empty()) throw DataError("text_match: generated output is empty (decoding produced no tokens)");
  if (candidates.empty()) throw CandidateError("no candidates to match");
  std::vector<std::string> texts{output};
  texts.insert(texts.end(), candidates.begin(), candidates.end());
  const Tensor<double> e = embed(texts);
  if (e.rows() != texts.size()) throw DimensionError("text_match: embedder returned the wrong number of rows");
  ClosedResult r;
  for (std::size_t i = 1; i < e.rows(); ++i) r.scores.push_back(cosine(e.row(0), e.row(i)));
  r.best = argmax_first(r.scores);
  return r;
}

}  // namespace pengi::infer
