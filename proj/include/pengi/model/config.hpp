#pragma once

#include <cstddef>
#include <string>

#include "pengi/core/error.hpp"

namespace pengi::model {

/// Which components train. `kFrozenAudio` also freezes the audio encoder;
/// `kExpB` drops the text encoder and feeds mean-pooled LM token embeddings of
/// the prompt to the text mapper.
enum class Ablation { kFull, kFrozenAudio, kExpB };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "frozen-audio") return Ablation::kFrozenAudio;
  if (s == "exp-b") return Ablation::kExpB;
  throw ConfigError("unknown ablation mode '" + s + "' (expected full, frozen-audio or exp-b)");
}

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kFrozenAudio: return "frozen-audio";
    case Ablation::kExpB: return "exp-b";
  }
  return "full";
}

struct ModelConfig {
  // Frozen causal LM
  std::size_t d_lm = 128;
  std::size_t lm_layers = 4;
  std::size_t lm_heads = 4;
  std::size_t lm_context = 64;

  // Shared embedding width of the two encoders
  std::size_t d_embed = 64;

  std::size_t n_mels = 64;
  std::size_t audio_width = 64;
  std::size_t audio_layers = 2;
  std::size_t audio_heads = 4;
  std::size_t patch_frames = 4;
  std::size_t max_patches = 64;
  // Global log-mel standardization applied before patch projection
  double input_mean = -1.0;
  double input_std = 3.0;

  std::size_t text_width = 64;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t max_prompt_tokens = 40;

  std::size_t mapper_layers = 2;
  std::size_t mapper_heads = 4;
  std::size_t prefix_k = 8;

  std::size_t mlp_ratio = 4;
  std::size_t max_caption_tokens = 32;

  Ablation ablation = Ablation::kFull;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(d_lm, "d_lm");
    positive(lm_layers, "lm_layers");
    positive(d_embed, "d_embed");
    positive(prefix_k, "prefix_k");
    positive(patch_frames, "patch_frames");
    positive(max_caption_tokens, "max_caption_tokens");
    if (!(input_std > 0.0)) throw ConfigError("model.input_std must be positive");
    if (d_lm % lm_heads || d_lm % mapper_heads) throw ConfigError("model.d_lm must divide evenly into heads");
    if (audio_width % audio_heads) throw ConfigError("model.audio_width must divide evenly into heads");
    if (text_width % text_heads) throw ConfigError("model.text_width must divide evenly into heads");
    if (2 * prefix_k + 1 > lm_context) throw ConfigError("model.lm_context cannot hold the prefix");
  }
};

}  // namespace pengi::model
