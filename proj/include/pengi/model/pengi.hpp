#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pengi/core/checkpoint.hpp"
#include "pengi/core/ops.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/config.hpp"
#include "pengi/model/networks.hpp"
#include "pengi/model/tokenizer.hpp"

namespace pengi::model {

/// 2k prefix rows (audio rows first, then text rows), optionally followed by
/// LM embeddings of a second text input.
template <class T>
struct Prefix {
  Tensor<T> rows;
  std::size_t k = 0;

  std::size_t length() const { return rows.rows(); }
};

/// Named parameters the optimizer may touch: the audio encoder (unless
/// frozen) and both mapping networks. Never the text encoder or the LM.
template <class T>
struct TrainableSet {
  std::vector<std::pair<std::string, Tensor<T>*>> entries;

  std::vector<Tensor<T>*> tensors() const {
    std::vector<Tensor<T>*> out;
    for (const auto& [name, t] : entries) out.push_back(t);
    return out;
  }

  bool contains_prefix(std::string_view prefix) const {
    for (const auto& [name, t] : entries)
      if (name.starts_with(prefix)) return true;
    return false;
  }
};

/// Audio encoder, text encoder, two mapping networks and the frozen causal LM.
template <class T>
struct PengiModel {
  ModelConfig config;
  Tokenizer tokenizer;
  AudioEncoder<T> audio;
  TextEncoder<T> text;
  MappingNetwork<T> map_audio;
  MappingNetwork<T> map_text;
  CausalLM<T> lm;

  PengiModel() = default;
  PengiModel(const ModelConfig& c, Tokenizer tok, std::uint64_t seed) : config(c), tokenizer(std::move(tok)) {
    config.validate();
    Rng init(seed, "init");
    Rng r_audio = init.fork("audio_encoder");
    Rng r_text = init.fork("text_encoder");
    Rng r_m1 = init.fork("map_audio");
    Rng r_m2 = init.fork("map_text");
    Rng r_lm = init.fork("lm");
    const std::size_t v = tokenizer.size();
    audio = AudioEncoder<T>(config, r_audio);
    text = TextEncoder<T>(config, v, r_text);
    map_audio = MappingNetwork<T>(config.d_embed, config, r_m1);
    map_text = MappingNetwork<T>(config.ablation == Ablation::kExpB ? config.d_lm : config.d_embed, config, r_m2);
    lm = CausalLM<T>(config, v, r_lm);
    apply_freeze();
  }

  std::size_t k() const { return config.prefix_k; }

  /// Sets requires_grad on every parameter from the component freeze flags.
  void apply_freeze() {
    audio.frozen = config.ablation == Ablation::kFrozenAudio;
    text.frozen = true;
    lm.frozen = true;
    auto set = [](bool trainable) {
      return [trainable](const std::string&, Tensor<T>& t) { t.set_requires_grad(trainable); };
    };
    audio.visit("", set(!audio.frozen));
    text.visit("", set(!text.frozen));
    map_audio.visit("", set(true));
    map_text.visit("", set(true));
    lm.visit("", set(!lm.frozen));
  }

  template <class F>
  void visit(F&& f) {
    audio.visit("audio_encoder.", f);
    text.visit("text_encoder.", f);
    map_audio.visit("map_audio.", f);
    map_text.visit("map_text.", f);
    lm.visit("lm.", f);
  }

  TrainableSet<T> trainable() {
    TrainableSet<T> set;
    auto take = [&set](const std::string& name, Tensor<T>& t) {
      if (t.requires_grad()) set.entries.emplace_back(name, &t);
    };
    if (!audio.frozen) audio.visit("audio_encoder.", take);
    map_audio.visit("map_audio.", take);
    map_text.visit("map_text.", take);
    return set;
  }

  std::vector<TokenId> encode_prompt(std::string_view prompt) const {
    auto ids = tokenizer.encode(prompt);
    if (ids.size() > config.max_prompt_tokens) {
      throw LengthError("prompt \"" + std::string(prompt) + "\" has " + std::to_string(ids.size()) +
                        " tokens, limit is " + std::to_string(config.max_prompt_tokens));
    }
    return ids;
  }

  /// Text-side embedding fed to m2: the text encoder output, or in exp-b mode
  /// the mean of the LM's token embeddings over [BOS] + prompt.
  Var<T> prompt_embedding(Tape<T>& tp, std::span<const std::vector<TokenId>> prompts) {
    if (config.ablation != Ablation::kExpB) return text(tp, prompts);
    std::vector<TokenId> ids;
    std::vector<std::size_t> segments;
    for (const auto& p : prompts) {
      ids.push_back(Tokenizer::kBos);
      ids.insert(ids.end(), p.begin(), p.end());
      segments.push_back(p.size() + 1);
    }
    return mean_pool(lm.embed(tp, ids), std::span<const std::size_t>(segments));
  }

  /// Packed prefixes for a batch: [(B * 2k) x d_lm], example b at rows [2kb, 2k(b+1)).
  /// `prompt_embeddings` are precomputed m2 inputs, one row per example.
  Var<T> prefixes(Tape<T>& tp, std::span<const Tensor<T>* const> mels, Var<T> prompt_embeddings) {
    if (prompt_embeddings.rows() != mels.size()) throw DimensionError("prefixes: batch size mismatch");
    return prefixes_from_embeddings(audio(tp, mels), prompt_embeddings);
  }

  /// Same as above from precomputed audio-encoder outputs (one row per example).
  Var<T> prefixes_from_embeddings(Var<T> audio_embeddings, Var<T> prompt_embeddings) {
    if (prompt_embeddings.rows() != audio_embeddings.rows()) throw DimensionError("prefixes: batch size mismatch");
    Var<T> a = map_audio(audio_embeddings);
    Var<T> t = map_text(prompt_embeddings);
    const std::size_t kk = k();
    std::vector<Var<T>> parts;
    for (std::size_t b = 0; b < audio_embeddings.rows(); ++b) {
      parts.push_back(slice_rows(a, b * kk, kk));
      parts.push_back(slice_rows(t, b * kk, kk));
    }
    return concat_rows(std::span<const Var<T>>(parts));
  }

  Var<T> prefixes(Tape<T>& tp, std::span<const Tensor<T>* const> mels, std::span<const std::string> prompts) {
    std::vector<std::vector<TokenId>> ids;
    for (const auto& p : prompts) ids.push_back(encode_prompt(p));
    return prefixes(tp, mels, prompt_embedding(tp, ids));
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.add_bytes("meta.vocab", tokenizer.serialize());
    visit([&ck](const std::string& name, Tensor<T>& t) { ck.add(name, t); });
    return ck;
  }

  /// Loads every parameter whose name starts with one of `prefixes` (all when empty).
  void load(const Checkpoint& ck, std::span<const std::string> prefixes = {}) {
    visit([&](const std::string& name, Tensor<T>& t) {
      bool wanted = prefixes.empty();
      for (const auto& p : prefixes) wanted = wanted || name.starts_with(p);
      if (!wanted) return;
      Tensor<T> loaded = ck.tensor<T>(name);
      if (loaded.shape() != t.shape()) {
        throw DataError("checkpoint parameter " + name + " has shape " + shape_string(loaded.shape()) +
                        ", model expects " + shape_string(t.shape()));
      }
      std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
    });
  }

  /// Checkpoint restricted to one component, e.g. "lm." or "text_encoder.".
  Checkpoint component_checkpoint(std::string_view prefix) {
    Checkpoint ck;
    visit([&](const std::string& name, Tensor<T>& t) {
      if (name.starts_with(prefix)) ck.add(name, t);
    });
    return ck;
  }
};

/// Causal logits over prefix rows followed by the embedded tokens:
/// [(prefix_len + tokens) x V].
template <class T>
Var<T> lm_logits(Tape<T>& tp, CausalLM<T>& lm, const Tensor<T>& prefix, std::span<const TokenId> tokens) {
  if (prefix.cols() != lm.width()) throw DimensionError("lm_logits: prefix width does not match LM");
  const std::size_t n = prefix.rows() + tokens.size();
  if (n > lm.context) {
    throw LengthError("lm_logits: " + std::to_string(n) + " positions exceed LM context " + std::to_string(lm.context));
  }
  Var<T> x = tp.constant(prefix);
  if (!tokens.empty()) x = concat_rows({x, lm.embed(tp, tokens)});
  const std::size_t seg[1] = {n};
  return lm.logits(x, seg);
}

/// Builds the 2k-row prefix for one clip and prompt.
template <class T>
Prefix<T> assemble_prefix(PengiModel<T>& model, const Tensor<T>& mel, std::string_view prompt) {
  Tape<T> tp;
  const Tensor<T>* mels[1] = {&mel};
  const std::string prompts[1] = {std::string(prompt)};
  Var<T> p = model.prefixes(tp, mels, prompts);
  return Prefix<T>{p.value(), model.k()};
}

/// Prefix followed by the LM's own token embeddings of `second_text`.
template <class T>
Prefix<T> assemble_prefix_with_context(PengiModel<T>& model, const Tensor<T>& mel, std::string_view prompt,
                                       std::string_view second_text) {
  Prefix<T> base = assemble_prefix(model, mel, prompt);
  const auto ids = model.tokenizer.encode(second_text);
  if (ids.empty()) return base;
  Tape<T> tp;
  Var<T> joined = concat_rows({tp.constant(base.rows), model.lm.embed(tp, ids)});
  return Prefix<T>{joined.value(), base.k};
}

}  // namespace pengi::model
