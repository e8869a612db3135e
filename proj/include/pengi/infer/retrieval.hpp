#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pengi/infer/closed.hpp"

namespace pengi::infer {

struct IndexEntry {
  std::string audio_id;
  std::string caption;
  std::vector<double> embedding;  // unit length
};

/// Generated captions of a corpus with their text embeddings.
struct CaptionIndex {
  std::vector<IndexEntry> entries;

  std::size_t size() const { return entries.size(); }
};

inline std::vector<double> unit(std::span<const double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  if (n == 0.0) throw NumericError("caption index: zero-length embedding");
  n = std::sqrt(n);
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

/// Index from already generated captions.
inline CaptionIndex index_captions(std::span<const std::string> audio_ids, std::span<const std::string> captions,
                                   const Embedder& embed) {
  if (audio_ids.empty()) throw DataError("caption index: corpus is empty");
  if (audio_ids.size() != captions.size()) throw ContractError("caption index: ids and captions differ in length");
  const Tensor<double> e = embed(captions);
  CaptionIndex idx;
  for (std::size_t i = 0; i < audio_ids.size(); ++i) idx.entries.push_back({audio_ids[i], captions[i], unit(e.row(i))});
  return idx;
}

/// Captions every clip with the captioning prompt, then indexes the captions.
template <class T>
CaptionIndex build_caption_index(model::PengiModel<T>& m, std::span<const Tensor<T>> mels,
                                 std::span<const std::string> audio_ids, const std::string& prompt,
                                 const DecodeOptions& o, bool greedy = false) {
  if (mels.empty()) throw DataError("caption index: corpus is empty");
  std::vector<std::string> captions;
  for (const auto& x : mels) {
    auto g = generate(m, model::assemble_prefix(m, x, prompt), o, greedy);
    // An empty generation still needs an embeddable entry.
    captions.push_back(g.text.empty() ? std::string("<unk>") : g.text);
  }
  return index_captions(audio_ids, captions, text_encoder_embedder(m));
}

struct Ranked {
  std::vector<std::size_t> order;  // entry indices, best first
  std::vector<double> similarity;  // aligned with order
};

/// Entries ranked by cosine between query and caption embeddings; ties keep
/// index order.
inline Ranked rank(const CaptionIndex& index, const std::string& query, const Embedder& embed) {
  if (query.empty()) throw DataError("retrieve: empty query");
  const std::string q[1] = {query};
  const auto qv = unit(embed(q).row(0));
  std::vector<double> sim;
  for (const auto& e : index.entries) {
    double d = 0.0;
    for (std::size_t j = 0; j < qv.size(); ++j) d += qv[j] * e.embedding[j];
    sim.push_back(d);
  }
  Ranked r;
  r.order.resize(sim.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  for (auto i : r.order) r.similarity.push_back(sim[i]);
  return r;
}

/// Top-k audio ids for a text query.
inline std::vector<std::string> retrieve(const CaptionIndex& index, const std::string& query, std::size_t k,
                                         const Embedder& embed) {
  if (k == 0 || k > index.size()) {
    throw ContractError("retrieve: k = " + std::to_string(k) + " outside 1.." + std::to_string(index.size()));
  }
  const auto r = rank(index, query, embed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(index.entries[r.order[i]].audio_id);
  return out;
}

/// Entries whose caption occurs exactly once in the index.
inline std::vector<std::size_t> unique_caption_entries(const CaptionIndex& index) {
  std::map<std::string, std::size_t> count;
  for (const auto& e : index.entries) ++count[e.caption];
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < index.size(); ++i)
    if (count[index.entries[i].caption] == 1) out.push_back(i);
  return out;
}

}  // namespace pengi::infer
