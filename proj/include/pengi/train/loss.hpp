#pragma once

#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "pengi/core/ops.hpp"
#include "pengi/model/pengi.hpp"

namespace pengi::train {

using model::PengiModel;
using model::Tokenizer;

/// Packed LM input for a batch. Example b occupies `prefix_len` prefix rows
/// followed by [BOS, c_1 .. c_{l-1}]; the BOS row predicts c_1 and the last
/// row predicts c_l = EOS. Prefix rows carry weight 0, caption rows weight
/// 1 / (B * l_b), so the loss is the batch mean of per-caption token means.
template <class T>
struct CaptionLayout {
  std::size_t prefix_len = 0;
  std::vector<std::vector<TokenId>> inputs;  // per example, length l_b
  std::vector<TokenId> targets;              // per packed row
  std::vector<T> weights;                    // per packed row
  std::vector<std::size_t> segments;         // 2k + l_b per example

  std::size_t rows() const { return targets.size(); }
};

template <class T>
CaptionLayout<T> caption_layout(std::span<const std::vector<TokenId>> captions, std::size_t prefix_len,
                                std::size_t context) {
  if (captions.empty()) throw ContractError("caption batch is empty");
  CaptionLayout<T> lay;
  lay.prefix_len = prefix_len;
  const T batch = T(captions.size());
  for (std::size_t b = 0; b < captions.size(); ++b) {
    const auto& c = captions[b];
    if (c.empty() || c.back() != Tokenizer::kEos) throw ContractError("caption " + std::to_string(b) + " does not end with EOS");
    const std::size_t n = prefix_len + c.size();
    if (n > context) {
      throw LengthError("triple " + std::to_string(b) + ": prefix of " + std::to_string(prefix_len) + " rows plus " +
                        std::to_string(c.size()) + " caption tokens exceeds LM context " + std::to_string(context));
    }
    std::vector<TokenId> in{Tokenizer::kBos};
    in.insert(in.end(), c.begin(), c.end() - 1);
    lay.inputs.push_back(std::move(in));
    lay.targets.insert(lay.targets.end(), prefix_len, Tokenizer::kPad);
    lay.weights.insert(lay.weights.end(), prefix_len, T(0));
    lay.targets.insert(lay.targets.end(), c.begin(), c.end());
    lay.weights.insert(lay.weights.end(), c.size(), T(1) / (batch * T(c.size())));
    lay.segments.push_back(n);
  }
  return lay;
}

/// Logits for the packed layout given packed prefixes [(B * prefix_len) x d_lm].
template <class T>
Var<T> caption_logits(model::CausalLM<T>& lm, const Var<T>& prefixes, const CaptionLayout<T>& lay) {
  auto& tp = prefixes.tape();
  std::vector<TokenId> all;
  for (const auto& in : lay.inputs) all.insert(all.end(), in.begin(), in.end());
  Var<T> emb = lm.embed(tp, all);
  std::vector<Var<T>> parts;
  std::size_t at = 0;
  for (std::size_t b = 0; b < lay.inputs.size(); ++b) {
    parts.push_back(slice_rows(prefixes, b * lay.prefix_len, lay.prefix_len));
    parts.push_back(slice_rows(emb, at, lay.inputs[b].size()));
    at += lay.inputs[b].size();
  }
  return lm.logits(concat_rows(std::span<const Var<T>>(parts)), lay.segments);
}

/// Masked captioning loss on already computed logits.
template <class T>
Var<T> caption_loss_from_logits(const Var<T>& logits, const CaptionLayout<T>& lay) {
  return weighted_cross_entropy(logits, std::span<const TokenId>(lay.targets), std::span<const T>(lay.weights));
}

/// Captioning loss of a batch: prefixes from audio and prompt embeddings,
/// frozen LM over [prefix; caption], cross-entropy on caption positions only.
template <class T>
Var<T> pengi_loss(PengiModel<T>& m, Tape<T>& tp, std::type_identity_t<std::span<const Tensor<T>* const>> mels,
                  const std::type_identity_t<Var<T>>& prompt_embeddings,
                  std::span<const std::vector<TokenId>> captions) {
  const auto lay = caption_layout<T>(captions, 2 * m.k(), m.lm.context);
  Var<T> p = m.prefixes(tp, mels, prompt_embeddings);
  return caption_loss_from_logits(caption_logits(m.lm, p, lay), lay);
}

template <class T>
Var<T> pengi_loss(PengiModel<T>& m, Tape<T>& tp, std::type_identity_t<std::span<const Tensor<T>* const>> mels,
                  std::span<const std::string> prompts, std::span<const std::vector<TokenId>> captions) {
  std::vector<std::vector<TokenId>> ids;
  for (const auto& p : prompts) ids.push_back(m.encode_prompt(p));
  return pengi_loss(m, tp, mels, m.prompt_embedding(tp, ids), captions);
}

}  // namespace pengi::train
