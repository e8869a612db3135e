#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "pengi/audio/mel.hpp"
#include "pengi/audio/wav.hpp"
#include "pengi/core/error.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/train/manifest.hpp"
#include "pengi/train/templates.hpp"

namespace pengi::audio {

enum class GeneratorKind { kPureTone, kHarmonicStack, kNoiseBurst, kAmTone, kChirp };

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double draw(Rng& rng) const { return rng.uniform(lo, hi); }
};

/// One synthetic sound class. `freq` is the tone frequency, the harmonic
/// fundamental, the AM carrier, or the chirp start/end band; it is unused for
/// noise. `caption` may use {loudness} and {duration}.
struct SynthSpec {
  std::string class_name;
  GeneratorKind kind;
  Range freq;
  std::string caption;
};

inline std::vector<SynthSpec> default_specs() {
  return {
      {"siren", GeneratorKind::kChirp, {600.0, 1600.0}, "a {loudness} siren wails {duration}"},
      {"whistle", GeneratorKind::kPureTone, {2500.0, 3500.0}, "a {loudness} whistle blows {duration}"},
      {"engine", GeneratorKind::kHarmonicStack, {80.0, 140.0}, "a {loudness} engine hums {duration}"},
      {"rain", GeneratorKind::kNoiseBurst, {0.0, 0.0}, "{loudness} rain falls {duration}"},
      {"bell", GeneratorKind::kAmTone, {4500.0, 5500.0}, "a {loudness} bell rings {duration}"},
  };
}

struct SynthOptions {
  std::size_t per_class = 8;
  std::uint64_t seed = 0;
  std::uint32_t sample_rate = 16000;
  double clip_seconds = 2.0;
  Range loud{0.6, 0.9};
  Range quiet{0.15, 0.3};
  Range short_event{1.0, 1.2};
  Range long_event{1.6, 1.9};
  double noise_floor = 0.001;
};

inline constexpr const char* kLoudWord = "loud";
inline constexpr const char* kQuietWord = "quiet";
inline constexpr const char* kShortWord = "briefly";
inline constexpr const char* kLongWord = "for a long time";
inline constexpr const char* kLoudQuestion = "is it loud?";
inline constexpr const char* kSourceQuestion = "what is making the sound?";

struct SynthItem {
  std::size_t class_index = 0;
  bool loud = false;
  bool long_event = false;
  AudioClip clip;
};

inline std::string caption_for(const SynthSpec& spec, bool loud, bool long_event) {
  return train::fill_pattern(spec.caption,
                             {{"loudness", {loud ? kLoudWord : kQuietWord}}, {"duration", {long_event ? kLongWord : kShortWord}}});
}

inline void check_specs(const std::vector<SynthSpec>& specs) {
  if (specs.empty()) throw ConfigError("synth: no classes");
  std::set<std::string> seen;
  for (const auto& s : specs) {
    if (s.class_name.empty()) throw ConfigError("synth: empty class name");
    if (!seen.insert(s.class_name).second) throw ConfigError("synth: duplicate class name '" + s.class_name + "'");
  }
}

/// Event waveform with peak amplitude 1 and 10 ms linear fades.
inline std::vector<double> synth_event(const SynthSpec& spec, std::size_t n, std::uint32_t rate, Rng& rng) {
  std::vector<double> x(n, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double sr = rate;
  switch (spec.kind) {
    case GeneratorKind::kPureTone: {
      const double f = spec.freq.draw(rng), ph = rng.uniform(0.0, two_pi);
      for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(two_pi * f * i / sr + ph);
      break;
    }
    case GeneratorKind::kHarmonicStack: {
      const double f0 = spec.freq.draw(rng);
      std::vector<double> ph(10);
      for (auto& p : ph) p = rng.uniform(0.0, two_pi);
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t h = 1; h <= ph.size(); ++h) v += std::sin(two_pi * f0 * h * i / sr + ph[h - 1]) / h;
        x[i] = v;
      }
      break;
    }
    case GeneratorKind::kNoiseBurst:
      for (auto& v : x) v = rng.uniform(-1.0, 1.0);
      break;
    case GeneratorKind::kAmTone: {
      const double fc = spec.freq.draw(rng), fm = rng.uniform(4.0, 8.0), ph = rng.uniform(0.0, two_pi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = (0.5 + 0.5 * std::sin(two_pi * fm * t)) * std::sin(two_pi * fc * t + ph);
      }
      break;
    }
    case GeneratorKind::kChirp: {
      const double span = 0.1 * (spec.freq.hi - spec.freq.lo);
      const double f0 = rng.uniform(spec.freq.lo, spec.freq.lo + span);
      const double f1 = rng.uniform(spec.freq.hi - span, spec.freq.hi);
      const double d = n / sr;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = std::sin(two_pi * (f0 * t + (f1 - f0) * t * t / (2.0 * d)));
      }
      break;
    }
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  const std::size_t fade = std::min<std::size_t>(n / 2, static_cast<std::size_t>(0.01 * sr));
  for (std::size_t i = 0; i < n; ++i) {
    double g = peak > 0.0 ? 1.0 / peak : 0.0;
    if (i < fade) g *= static_cast<double>(i) / fade;
    if (n - 1 - i < fade) g *= static_cast<double>(n - 1 - i) / fade;
    x[i] *= g;
  }
  return x;
}

/// One clip of exactly clip_seconds: low background noise plus one event at a
/// random onset.
inline SynthItem synth_clip(const std::vector<SynthSpec>& specs, std::size_t class_index, const SynthOptions& o,
                            Rng& rng) {
  SynthItem item;
  item.class_index = class_index;
  item.loud = rng.uniform() < 0.5;
  item.long_event = rng.uniform() < 0.5;
  const double amp = (item.loud ? o.loud : o.quiet).draw(rng);
  const double dur = std::min((item.long_event ? o.long_event : o.short_event).draw(rng), o.clip_seconds);
  const auto total = static_cast<std::size_t>(std::llround(o.clip_seconds * o.sample_rate));
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(dur * o.sample_rate)));
  const auto onset = static_cast<std::size_t>(rng.below(total - std::min(n, total) + 1));
  item.clip.sample_rate = o.sample_rate;
  item.clip.samples.resize(total);
  for (auto& v : item.clip.samples) v = o.noise_floor * rng.uniform(-1.0, 1.0);
  const auto ev = synth_event(specs[class_index], n, o.sample_rate, rng);
  for (std::size_t i = 0; i < n && onset + i < total; ++i) item.clip.samples[onset + i] += amp * ev[i];
  return item;
}

/// per_class clips for every class, in class order; deterministic given the seed.
inline std::vector<SynthItem> synth_items(const std::vector<SynthSpec>& specs, const SynthOptions& o) {
  check_specs(specs);
  if (o.per_class < 1) throw ConfigError("synth: per_class must be at least 1");
  Rng rng(o.seed, "data");
  std::vector<SynthItem> items;
  for (std::size_t c = 0; c < specs.size(); ++c)
    for (std::size_t i = 0; i < o.per_class; ++i) items.push_back(synth_clip(specs, c, o, rng));
  return items;
}

inline std::string clip_name(const SynthSpec& spec, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return "wav/" + spec.class_name + "_" + buf + ".wav";
}

/// Three rows per clip: sound-event, captioning and one seeded QA question.
inline std::vector<train::TrainingTriple> manifest_rows(const std::vector<SynthSpec>& specs,
                                                        const std::vector<SynthItem>& items, const SynthOptions& o) {
  using train::instantiate_template;
  using train::Task;
  using train::template_for;
  Rng rng(o.seed, "questions");
  std::vector<train::TrainingTriple> rows;
  std::vector<std::size_t> counter(specs.size(), 0);
  for (const auto& it : items) {
    const SynthSpec& spec = specs[it.class_index];
    const std::string audio = clip_name(spec, counter[it.class_index]++);
    const std::vector<std::string> labels{spec.class_name};
    auto add = [&](Task task, const train::TemplateRecord& rec) {
      const auto& tt = template_for(task);
      auto inst = instantiate_template(tt, rec);
      rows.push_back({audio, std::string(tt.name), inst.input_text, inst.output_text, labels});
    };
    add(Task::kSoundEvent, {{"class", labels}});
    add(Task::kCaptioning, {{"caption", {caption_for(spec, it.loud, it.long_event)}}});
    if (rng.uniform() < 0.5) {
      add(Task::kQa, {{"question", {kLoudQuestion}}, {"answer", {it.loud ? "yes" : "no"}}});
    } else {
      add(Task::kQa, {{"question", {kSourceQuestion}}, {"answer", labels}});
    }
  }
  return rows;
}

/// Every output text the synthetic grammar can produce.
inline std::vector<std::string> grammar_outputs(const std::vector<SynthSpec>& specs) {
  std::vector<std::string> out{"yes", "no"};
  for (const auto& s : specs) {
    out.push_back(s.class_name);
    for (bool loud : {false, true})
      for (bool lng : {false, true}) out.push_back(caption_for(s, loud, lng));
  }
  return out;
}

/// Language-model pretraining lines. Half are plain grammar outputs; the rest
/// are "context<TAB>output" where the context holds a task prompt and the
/// clip's attribute words in random order, so the LM learns to let earlier
/// context select its continuation.
inline std::vector<std::string> lm_corpus(const std::vector<SynthSpec>& specs, std::size_t lines, std::uint64_t seed) {
  using train::Task;
  using train::template_for;
  check_specs(specs);
  const auto pool = grammar_outputs(specs);
  Rng rng(seed, "lm_corpus");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < lines; ++i) {
    if (rng.uniform() < 0.5) {
      out.push_back(pool[rng.below(pool.size())]);
      continue;
    }
    const SynthSpec& spec = specs[rng.below(specs.size())];
    const bool loud = rng.uniform() < 0.5;
    const bool lng = rng.uniform() < 0.5;
    std::vector<std::string> attrs{spec.class_name, loud ? kLoudWord : kQuietWord, lng ? "long" : kShortWord};
    rng.shuffle(attrs);
    std::string prompt, target;
    switch (rng.below(4)) {
      case 0:
        prompt = template_for(Task::kSoundEvent).input_prompt;
        target = spec.class_name;
        break;
      case 1:
        prompt = template_for(Task::kCaptioning).input_prompt;
        target = caption_for(spec, loud, lng);
        break;
      case 2:
        prompt = std::string("question: ") + kLoudQuestion;
        target = loud ? "yes" : "no";
        break;
      default:
        prompt = std::string("question: ") + kSourceQuestion;
        target = spec.class_name;
        break;
    }
    out.push_back(prompt + " " + attrs[0] + " " + attrs[1] + " " + attrs[2] + '\t' + target);
  }
  return out;
}

struct SynthResult {
  std::vector<train::TrainingTriple> rows;
  std::filesystem::path manifest;
};

/// Writes wav/*.wav and manifest.jsonl under `dir`.
inline SynthResult synth_corpus(const std::vector<SynthSpec>& specs, const SynthOptions& o,
                                const std::filesystem::path& dir) {
  const auto items = synth_items(specs, o);
  std::filesystem::create_directories(dir / "wav");
  std::vector<std::size_t> counter(specs.size(), 0);
  for (const auto& it : items) write_wav(dir / clip_name(specs[it.class_index], counter[it.class_index]++), it.clip);
  SynthResult r{manifest_rows(specs, items, o), dir / "manifest.jsonl"};
  train::write_manifest(r.manifest, r.rows);
  return r;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) os << l << "\n";
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace pengi::audio
