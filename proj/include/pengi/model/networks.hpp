#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/ops.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/config.hpp"
#include "pengi/model/layers.hpp"
#include "pengi/model/tokenizer.hpp"

namespace pengi::model {

/// Value used to pad partial patches; equals the log floor of silence.
inline constexpr double kLogFloor = -23.025850929940457;  // log(1e-10)

/// Groups consecutive mel frames into flattened patches, padding the last
/// patch with the log floor. A [frames x mels] input becomes
/// [ceil(frames / p) x (p * mels)].
template <class T>
Tensor<T> patchify(const Tensor<T>& mel, std::size_t patch_frames) {
  const std::size_t frames = mel.rows(), mels = mel.cols();
  const std::size_t n = (frames + patch_frames - 1) / patch_frames;
  Tensor<T> out(Shape{n, patch_frames * mels}, T(kLogFloor));
  std::copy(mel.data().begin(), mel.data().end(), out.data().begin());
  return out;
}

/// Audio encoder: patch projection, transformer, mean pool, projection.
/// Produces one d_embed vector per clip.
template <class T>
struct AudioEncoder {
  std::size_t patch_frames = 4;
  std::size_t n_mels = 64;
  double input_mean = 0.0;
  double input_std = 1.0;
  Linear<T> patch_proj;
  Tensor<T> positions;
  TransformerStack<T> stack;
  Linear<T> out_proj;
  bool frozen = false;

  AudioEncoder() = default;
  AudioEncoder(const ModelConfig& c, Rng& rng)
      : patch_frames(c.patch_frames),
        n_mels(c.n_mels),
        input_mean(c.input_mean),
        input_std(c.input_std),
        patch_proj(c.patch_frames * c.n_mels, c.audio_width, rng),
        positions(normal_init<T>({c.max_patches, c.audio_width}, rng, 0.02)),
        stack(c.audio_layers, c.audio_width, c.audio_heads, c.mlp_ratio, rng),
        out_proj(c.audio_width, c.d_embed, rng) {}

  /// mels: one [frames x n_mels] matrix per clip -> [clips x d_embed]
  Var<T> operator()(Tape<T>& tp, std::span<const Tensor<T>* const> mels) {
    if (mels.empty()) throw ContractError("audio encoder: empty batch");
    std::vector<std::size_t> segments;
    std::vector<T> packed;
    std::size_t width = 0;
    for (const Tensor<T>* m : mels) {
      if (m->cols() != n_mels) {
        throw DimensionError("audio encoder: mel width " + std::to_string(m->cols()) + " does not match config");
      }
      Tensor<T> p = patchify(*m, patch_frames);
      width = p.cols();
      segments.push_back(p.rows());
      for (T v : p.data()) packed.push_back(T((double(v) - input_mean) / input_std));
    }
    const std::size_t rows = packed.size() / width;
    Var<T> x = tp.constant(Tensor<T>(Shape{rows, width}, std::move(packed)));
    Var<T> h = patch_proj(x);
    h = add(h, positions_for(tp.parameter(positions), std::span<const std::size_t>(segments)));
    h = stack(h, segments, false);
    return out_proj(mean_pool(h, std::span<const std::size_t>(segments)));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    patch_proj.visit(prefix + "patch_proj.", f);
    f(prefix + "positions", positions);
    stack.visit(prefix + "stack.", f);
    out_proj.visit(prefix + "out_proj.", f);
  }
};

/// Text encoder over [BOS] + prompt tokens; mean pooled and projected to d_embed.
template <class T>
struct TextEncoder {
  std::size_t max_tokens = 40;
  Tensor<T> tokens;
  Tensor<T> positions;
  TransformerStack<T> stack;
  Linear<T> out_proj;
  bool frozen = true;

  TextEncoder() = default;
  TextEncoder(const ModelConfig& c, std::size_t vocab, Rng& rng)
      : max_tokens(c.max_prompt_tokens),
        tokens(normal_init<T>({vocab, c.text_width}, rng, 0.02)),
        positions(normal_init<T>({c.max_prompt_tokens + 1, c.text_width}, rng, 0.02)),
        stack(c.text_layers, c.text_width, c.text_heads, c.mlp_ratio, rng),
        out_proj(c.text_width, c.d_embed, rng) {}

  Var<T> operator()(Tape<T>& tp, std::span<const std::vector<TokenId>> prompts) {
    if (prompts.empty()) throw ContractError("text encoder: empty batch");
    std::vector<TokenId> ids;
    std::vector<std::size_t> segments;
    for (const auto& p : prompts) {
      if (p.size() > max_tokens) {
        throw LengthError("prompt of " + std::to_string(p.size()) + " tokens exceeds the limit of " +
                          std::to_string(max_tokens));
      }
      ids.push_back(Tokenizer::kBos);
      ids.insert(ids.end(), p.begin(), p.end());
      segments.push_back(p.size() + 1);
    }
    Var<T> h = embedding_lookup(tp.parameter(tokens), std::span<const TokenId>(ids));
    h = add(h, positions_for(tp.parameter(positions), std::span<const std::size_t>(segments)));
    h = stack(h, segments, false);
    return out_proj(mean_pool(h, std::span<const std::size_t>(segments)));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "tokens", tokens);
    f(prefix + "positions", positions);
    stack.visit(prefix + "stack.", f);
    out_proj.visit(prefix + "out_proj.", f);
  }
};

/// Maps one embedding to k LM-space rows: the input is projected to k seed
/// rows, concatenated with k learned constant rows, run through a
/// bidirectional transformer, and the constant positions are read out.
template <class T>
struct MappingNetwork {
  std::size_t k = 8;
  std::size_t width = 128;
  Linear<T> in_proj;
  Tensor<T> constants;
  TransformerStack<T> stack;

  MappingNetwork() = default;
  MappingNetwork(std::size_t in_dim, const ModelConfig& c, Rng& rng)
      : k(c.prefix_k),
        width(c.d_lm),
        in_proj(in_dim, c.prefix_k * c.d_lm, rng),
        constants(normal_init<T>({c.prefix_k, c.d_lm}, rng, 1.0)),
        stack(c.mapper_layers, c.d_lm, c.mapper_heads, c.mlp_ratio, rng) {}

  /// [B x in_dim] -> [(B * k) x d_lm], rows of example b at [b*k, (b+1)*k).
  Var<T> operator()(Var<T> e) {
    auto& tp = e.tape();
    const std::size_t batch = e.rows();
    Var<T> seeds = reshape(in_proj(e), batch * k, width);
    Var<T> consts = tp.parameter(constants);
    std::vector<Var<T>> parts;
    for (std::size_t b = 0; b < batch; ++b) {
      parts.push_back(slice_rows(seeds, b * k, k));
      parts.push_back(consts);
    }
    std::vector<std::size_t> segments(batch, 2 * k);
    Var<T> h = stack(concat_rows(std::span<const Var<T>>(parts)), segments, false);
    std::vector<Var<T>> outs;
    for (std::size_t b = 0; b < batch; ++b) outs.push_back(slice_rows(h, b * 2 * k + k, k));
    return concat_rows(std::span<const Var<T>>(outs));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    in_proj.visit(prefix + "in_proj.", f);
    f(prefix + "constants", constants);
    stack.visit(prefix + "stack.", f);
  }
};

/// Decoder-only LM with learned positions and a weight-tied output layer.
template <class T>
struct CausalLM {
  std::size_t context = 64;
  Tensor<T> tokens;
  Tensor<T> positions;
  TransformerStack<T> stack;
  bool frozen = true;

  CausalLM() = default;
  CausalLM(const ModelConfig& c, std::size_t vocab, Rng& rng)
      : context(c.lm_context),
        tokens(normal_init<T>({vocab, c.d_lm}, rng, 0.02)),
        positions(normal_init<T>({c.lm_context, c.d_lm}, rng, 0.02)),
        stack(c.lm_layers, c.d_lm, c.lm_heads, c.mlp_ratio, rng) {}

  std::size_t vocab() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }

  Var<T> embed(Tape<T>& tp, std::span<const TokenId> ids) { return embedding_lookup(tp.parameter(tokens), ids); }

  /// Final hidden states for packed input embeddings.
  Var<T> hidden(Var<T> x, std::span<const std::size_t> segments) {
    for (std::size_t n : segments) {
      if (n > context) {
        throw LengthError("sequence of " + std::to_string(n) + " positions exceeds LM context " +
                          std::to_string(context));
      }
    }
    auto& tp = x.tape();
    Var<T> h = add(x, positions_for(tp.parameter(positions), segments));
    return stack(h, segments, true);
  }

  /// Logits for every row of the packed input: hidden . token_table^T.
  Var<T> logits(Var<T> x, std::span<const std::size_t> segments) {
    Var<T> h = hidden(x, segments);
    return matmul_nt(h, x.tape().parameter(tokens));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "tokens", tokens);
    f(prefix + "positions", positions);
    stack.visit(prefix + "stack.", f);
  }
};

}  // namespace pengi::model
