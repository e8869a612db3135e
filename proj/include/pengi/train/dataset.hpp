#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pengi/audio/mel.hpp"
#include "pengi/audio/wav.hpp"
#include "pengi/core/error.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/tokenizer.hpp"
#include "pengi/train/manifest.hpp"

namespace pengi::train {

using model::Tokenizer;

/// Caption token ids followed by EOS; rejects captions longer than `max_tokens`
/// (EOS included) instead of truncating.
inline std::vector<TokenId> encode_caption(const Tokenizer& tok, const std::string& text, std::size_t max_tokens,
                                           const std::string& what = "caption") {
  auto ids = tok.encode(text);
  if (ids.empty()) throw DataError(what + " is empty");
  ids.push_back(Tokenizer::kEos);
  if (ids.size() > max_tokens) {
    throw LengthError(what + " \"" + text + "\" needs " + std::to_string(ids.size()) + " tokens including EOS, limit is " +
                      std::to_string(max_tokens));
  }
  return ids;
}

/// Vocabulary covering every prompt and output of the manifests plus extra lines.
inline Tokenizer build_vocabulary(const std::vector<std::vector<TrainingTriple>>& manifests,
                                  const std::vector<std::string>& extra) {
  std::vector<std::string> texts = extra;
  for (const auto& rows : manifests)
    for (const auto& r : rows) {
      texts.push_back(r.input_text);
      texts.push_back(r.output_text);
      for (const auto& l : r.class_labels) texts.push_back(l);
    }
  return Tokenizer::build(texts);
}

struct Example {
  std::size_t clip = 0;  // index into Dataset::mels
  std::size_t row = 0;   // manifest row
  std::string task;
  std::string prompt;
  std::string output_text;
  std::vector<TokenId> caption;  // output tokens + EOS
  std::vector<std::string> labels;
};

/// Manifest rows with their clips loaded once, trimmed or padded to the clip
/// duration and converted to log-mel matrices.
template <class T>
struct Dataset {
  std::vector<Tensor<T>> mels;
  std::vector<std::string> clip_ids;
  std::vector<Example> examples;

  std::vector<std::size_t> where(const std::string& task) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < examples.size(); ++i)
      if (examples[i].task == task) idx.push_back(i);
    return idx;
  }
};

/// Clip preprocessing shared by training and evaluation. Truncation offsets
/// come from a per-clip stream so they do not depend on load order.
template <class T>
Tensor<T> clip_features(const audio::AudioClip& clip, const std::string& clip_id, const audio::MelConfig& cfg,
                        std::uint64_t seed) {
  Rng rng(seed, "truncation:" + clip_id);
  return audio::log_mel(audio::fix_duration(clip, cfg.clip_seconds, rng), cfg).frames.template cast<T>();
}

template <class T>
Dataset<T> load_dataset(const std::filesystem::path& manifest, const Tokenizer& tok, const audio::MelConfig& cfg,
                        std::size_t max_caption_tokens, std::uint64_t seed) {
  const auto rows = read_manifest(manifest);
  if (rows.empty()) throw DataError("manifest " + manifest.string() + " has no rows");
  Dataset<T> ds;
  std::map<std::string, std::size_t> clip_index;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    auto [it, fresh] = clip_index.emplace(r.audio, ds.mels.size());
    if (fresh) {
      ds.mels.push_back(clip_features<T>(audio::read_wav(resolve_audio(manifest, r)), r.audio, cfg, seed));
      ds.clip_ids.push_back(r.audio);
    }
    Example e;
    e.clip = it->second;
    e.row = i;
    e.task = r.task;
    e.prompt = r.input_text;
    e.output_text = r.output_text;
    e.caption = encode_caption(tok, r.output_text, max_caption_tokens,
                               "output of manifest row " + std::to_string(i + 1) + " (" + r.audio + ")");
    e.labels = r.class_labels;
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

}  // namespace pengi::train
