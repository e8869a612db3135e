#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pengi/model/pengi.hpp"

namespace pengi::infer {

inline constexpr const char* kUnkMarker = "<unk>";

/// For each prefix row, the vocabulary token whose LM input embedding has the
/// highest cosine similarity (ties to the lowest id). All-zero rows map to
/// the UNK marker.
template <class T>
std::vector<std::string> interpret_prefix(const Tensor<T>& prefix, const model::CausalLM<T>& lm,
                                          const model::Tokenizer& tok) {
  const Tensor<T>& table = lm.tokens;
  if (prefix.cols() != table.cols()) throw DimensionError("interpret_prefix: prefix width does not match LM");
  std::vector<double> norms(table.rows());
  for (std::size_t v = 0; v < table.rows(); ++v) {
    double n = 0.0;
    for (T x : table.row(v)) n += double(x) * double(x);
    norms[v] = std::sqrt(n);
  }
  std::vector<std::string> out;
  for (std::size_t r = 0; r < prefix.rows(); ++r) {
    const auto row = prefix.row(r);
    double rn = 0.0;
    for (T x : row) rn += double(x) * double(x);
    if (rn == 0.0 || !std::isfinite(rn)) {
      out.emplace_back(kUnkMarker);
      continue;
    }
    rn = std::sqrt(rn);
    std::size_t best = table.rows();
    double best_sim = 0.0;
    for (std::size_t v = 0; v < table.rows(); ++v) {
      if (norms[v] == 0.0) continue;
      double d = 0.0;
      const auto e = table.row(v);
      for (std::size_t j = 0; j < e.size(); ++j) d += double(row[j]) * double(e[j]);
      const double sim = d / (rn * norms[v]);
      if (best == table.rows() || sim > best_sim) {
        best = v;
        best_sim = sim;
      }
    }
    out.push_back(best == table.rows() ? std::string(kUnkMarker) : tok.token(TokenId(best)));
  }
  return out;
}

}  // namespace pengi::infer
