#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pengi/audio/mel.hpp"
#include "pengi/core/error.hpp"
#include "pengi/core/optim.hpp"
#include "pengi/eval/report.hpp"
#include "pengi/model/config.hpp"

namespace pengi::cli {

using nlohmann::json;

/// Built-in defaults; every accepted key appears here.
inline json default_config_json() {
  return json::parse(R"({
  "seed": 7,
  "precision": "f32",
  "mel": {"sample_rate": 16000, "n_mels": 64, "window": 1024, "hop": 320, "fmin": 50.0, "fmax": 8000.0,
          "clip_seconds": 2.0},
  "synth": {"classes": 4, "per_class": 24, "heldout_per_class": 16, "lm_lines": 2000},
  "model": {"d_lm": 64, "lm_layers": 2, "lm_heads": 4, "lm_context": 40, "d_embed": 64, "audio_width": 64,
            "audio_layers": 2, "audio_heads": 4, "patch_frames": 4, "max_patches": 64, "input_mean": -1.0,
            "input_std": 3.0, "text_width": 64, "text_layers": 1, "text_heads": 4, "max_prompt_tokens": 40,
            "mapper_layers": 1, "mapper_heads": 4, "prefix_k": 4, "mlp_ratio": 4, "max_caption_tokens": 32,
            "ablation": "full"},
  "lm_pretrain": {"steps": 1000, "batch": 32, "lr": 0.003, "warmup_steps": 40},
  "contrastive": {"enabled": true, "steps": 300, "batch": 16, "shared_dim": 512, "lr": 0.001, "warmup_steps": 30},
  "training": {"steps": 600, "batch": 16, "lr": 0.001, "warmup_steps": 100, "clip_norm": 0.0, "stop_below": 0.0,
               "eval_every": 50, "checkpoint_every": 0, "task_weights": {}},
  "inference": {"beam": 5, "max_len": 24, "alpha": 0.6, "normalize_loglik": true},
  "probe": {"layers": [1, 3], "hidden": 64, "steps": 300, "lr": 0.01, "shuffle_repeats": 5},
  "paths": {"work": "runs/default"}
})");
}

/// Rejects keys that the defaults do not have and values of another JSON type.
inline void check_against(const json& given, const json& schema, const std::string& where) {
  if (!given.is_object()) throw ConfigError("config: " + (where.empty() ? std::string("root") : where) + " must be an object");
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!schema.contains(k)) throw ConfigError("config: unknown key '" + path + "'");
    const json& s = schema.at(k);
    if (s.is_object()) {
      // task_weights is a free-form map of numbers
      if (path == "training.task_weights") {
        if (!v.is_object()) throw ConfigError("config: " + path + " must be an object");
        for (const auto& [task, w] : v.items())
          if (!w.is_number()) throw ConfigError("config: " + path + "." + task + " must be a number");
        continue;
      }
      check_against(v, s, path);
      continue;
    }
    const bool ok = (s.is_number() && v.is_number()) || (s.is_boolean() && v.is_boolean()) ||
                    (s.is_string() && v.is_string()) || (s.is_array() && v.is_array());
    if (!ok) throw ConfigError("config: " + path + " has the wrong type (" + std::string(v.type_name()) + ")");
    if (s.is_number_unsigned() && !(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0))) {
      throw ConfigError("config: " + path + " must be a non-negative integer");
    }
  }
}

/// Recursive merge of `over` into `base`.
inline void merge_into(json& base, const json& over) {
  for (const auto& [k, v] : over.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object() && k != "task_weights") merge_into(base[k], v);
    else base[k] = v;
  }
}

/// "a.b.c=value" with value parsed as JSON when possible, else taken as a string.
inline json override_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("--set: malformed key '" + key + "'");
    parts.push_back(p);
  }
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

struct LmPretrainSection {
  std::size_t steps, batch;
  AdamOptions adam;
};

struct ContrastiveSection {
  bool enabled;
  std::size_t steps, batch, shared_dim;
  AdamOptions adam;
};

struct TrainingSection {
  std::size_t steps, batch, eval_every, checkpoint_every;
  AdamOptions adam;
  double stop_below;
  std::map<std::string, double> task_weights;
};

struct InferenceSection {
  std::size_t beam, max_len;
  double alpha;
  bool normalize_loglik;
};

struct ProbeSection {
  std::vector<std::size_t> layers;
  std::size_t hidden, steps, shuffle_repeats;
  double lr;
};

struct SynthSection {
  std::size_t classes, per_class, heldout_per_class, lm_lines;
};

/// The whole run configuration. `raw` is the merged JSON the typed fields
/// were read from; its digest is the fingerprint carried by every artifact.
struct RunConfig {
  json raw;
  std::uint64_t seed = 0;
  std::string precision;
  audio::MelConfig mel;
  SynthSection synth{};
  model::ModelConfig model;
  LmPretrainSection lm{};
  ContrastiveSection contrastive{};
  TrainingSection training{};
  InferenceSection inference{};
  ProbeSection probe{};
  std::filesystem::path work;

  std::string fingerprint() const { return eval::hex_digest(raw.dump()); }
};

namespace detail {

template <class V>
V get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + section + "." + key + ": " + e.what());
  }
}

inline AdamOptions adam_from(const json& j, const char* section) {
  AdamOptions a;
  a.lr = get<double>(j, section, "lr");
  a.warmup_steps = get<std::size_t>(j, section, "warmup_steps");
  if (!(a.lr > 0.0)) throw ConfigError(std::string("config: ") + section + ".lr must be positive");
  return a;
}

}  // namespace detail

/// Typed view of a merged, schema-checked config.
inline RunConfig from_json(const json& j) {
  using detail::get;
  check_against(j, default_config_json(), "");
  RunConfig c;
  c.raw = j;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.precision = j.at("precision").get<std::string>();
  if (c.precision != "f32" && c.precision != "f64") throw ConfigError("config: precision must be f32 or f64");

  c.mel.sample_rate = get<std::uint32_t>(j, "mel", "sample_rate");
  c.mel.n_mels = get<std::size_t>(j, "mel", "n_mels");
  c.mel.window = get<std::size_t>(j, "mel", "window");
  c.mel.hop = get<std::size_t>(j, "mel", "hop");
  c.mel.fmin = get<double>(j, "mel", "fmin");
  c.mel.fmax = get<double>(j, "mel", "fmax");
  c.mel.clip_seconds = get<double>(j, "mel", "clip_seconds");
  c.mel.validate();

  c.synth = {get<std::size_t>(j, "synth", "classes"), get<std::size_t>(j, "synth", "per_class"),
             get<std::size_t>(j, "synth", "heldout_per_class"), get<std::size_t>(j, "synth", "lm_lines")};

  auto& m = c.model;
  m.d_lm = get<std::size_t>(j, "model", "d_lm");
  m.lm_layers = get<std::size_t>(j, "model", "lm_layers");
  m.lm_heads = get<std::size_t>(j, "model", "lm_heads");
  m.lm_context = get<std::size_t>(j, "model", "lm_context");
  m.d_embed = get<std::size_t>(j, "model", "d_embed");
  m.n_mels = c.mel.n_mels;
  m.audio_width = get<std::size_t>(j, "model", "audio_width");
  m.audio_layers = get<std::size_t>(j, "model", "audio_layers");
  m.audio_heads = get<std::size_t>(j, "model", "audio_heads");
  m.patch_frames = get<std::size_t>(j, "model", "patch_frames");
  m.max_patches = get<std::size_t>(j, "model", "max_patches");
  m.input_mean = get<double>(j, "model", "input_mean");
  m.input_std = get<double>(j, "model", "input_std");
  m.text_width = get<std::size_t>(j, "model", "text_width");
  m.text_layers = get<std::size_t>(j, "model", "text_layers");
  m.text_heads = get<std::size_t>(j, "model", "text_heads");
  m.max_prompt_tokens = get<std::size_t>(j, "model", "max_prompt_tokens");
  m.mapper_layers = get<std::size_t>(j, "model", "mapper_layers");
  m.mapper_heads = get<std::size_t>(j, "model", "mapper_heads");
  m.prefix_k = get<std::size_t>(j, "model", "prefix_k");
  m.mlp_ratio = get<std::size_t>(j, "model", "mlp_ratio");
  m.max_caption_tokens = get<std::size_t>(j, "model", "max_caption_tokens");
  m.ablation = model::parse_ablation(get<std::string>(j, "model", "ablation"));
  m.validate();

  c.lm = {get<std::size_t>(j, "lm_pretrain", "steps"), get<std::size_t>(j, "lm_pretrain", "batch"),
          detail::adam_from(j, "lm_pretrain")};
  c.contrastive = {get<bool>(j, "contrastive", "enabled"), get<std::size_t>(j, "contrastive", "steps"),
                   get<std::size_t>(j, "contrastive", "batch"), get<std::size_t>(j, "contrastive", "shared_dim"),
                   detail::adam_from(j, "contrastive")};
  c.training.steps = get<std::size_t>(j, "training", "steps");
  c.training.batch = get<std::size_t>(j, "training", "batch");
  c.training.eval_every = get<std::size_t>(j, "training", "eval_every");
  c.training.checkpoint_every = get<std::size_t>(j, "training", "checkpoint_every");
  c.training.adam = detail::adam_from(j, "training");
  c.training.adam.clip_norm = get<double>(j, "training", "clip_norm");
  c.training.stop_below = get<double>(j, "training", "stop_below");
  c.training.task_weights = get<std::map<std::string, double>>(j, "training", "task_weights");
  if (c.training.batch == 0) throw ConfigError("config: training.batch must be positive");

  c.inference = {get<std::size_t>(j, "inference", "beam"), get<std::size_t>(j, "inference", "max_len"),
                 get<double>(j, "inference", "alpha"), get<bool>(j, "inference", "normalize_loglik")};
  if (c.inference.beam == 0) throw ConfigError("config: inference.beam must be at least 1");

  c.probe.layers = get<std::vector<std::size_t>>(j, "probe", "layers");
  c.probe.hidden = get<std::size_t>(j, "probe", "hidden");
  c.probe.steps = get<std::size_t>(j, "probe", "steps");
  c.probe.shuffle_repeats = get<std::size_t>(j, "probe", "shuffle_repeats");
  c.probe.lr = get<double>(j, "probe", "lr");
  for (auto l : c.probe.layers)
    if (l < 1 || l > 3) throw ConfigError("config: probe.layers entries must be 1, 2 or 3");

  c.work = get<std::string>(j, "paths", "work");
  return c;
}

/// Defaults, then the optional file, then each --set assignment in order.
inline RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& sets) {
  json j = default_config_json();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    json f = json::parse(is, nullptr, false);
    if (f.is_discarded()) throw ConfigError("config file " + file.string() + " is not valid JSON");
    check_against(f, default_config_json(), "");
    merge_into(j, f);
  }
  for (const auto& s : sets) {
    const json patch = override_patch(s);
    check_against(patch, default_config_json(), "");
    merge_into(j, patch);
  }
  return from_json(j);
}

}  // namespace pengi::cli
