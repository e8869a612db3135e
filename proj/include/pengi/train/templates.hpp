#pragma once

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pengi/core/error.hpp"

namespace pengi::train {

enum class Task {
  kCaptioning,
  kQa,
  kSoundEvent,
  kScene,
  kEmotion,
  kSentiment,
  kMusicAnalysis,
  kMusicNote,
  kAuxiliary,
};

struct TaskTemplate {
  Task task;
  std::string_view name;
  std::string_view input_prompt;
  std::string_view output_pattern;
};

/// The built-in task templates. Placeholders are written {name}.
inline constexpr std::array<TaskTemplate, 9> kTemplates = {{
    {Task::kCaptioning, "captioning", "generate audio caption", "{caption}"},
    {Task::kQa, "qa", "question: {question}", "{answer}"},
    {Task::kSoundEvent, "sound-event", "this is a sound of", "{class}"},
    {Task::kScene, "scene", "this acoustic scene is", "{scene}"},
    {Task::kEmotion, "emotion", "this emotion is", "{emotion}"},
    {Task::kSentiment, "sentiment", "this sentiment is", "{sentiment}"},
    {Task::kMusicAnalysis, "music-analysis", "music analysis",
     "this is a sound of music in language {language} and genre {genre}"},
    {Task::kMusicNote, "music-note", "this music note is", "produced by {instrument}, pitch {pitch}"},
    {Task::kAuxiliary, "auxiliary", "generate metadata", "{metadata}"},
}};

inline const TaskTemplate& template_for(Task t) {
  for (const auto& tt : kTemplates)
    if (tt.task == t) return tt;
  throw TemplateError("no template for task");
}

inline const TaskTemplate& template_for(std::string_view name) {
  for (const auto& tt : kTemplates)
    if (tt.name == name) return tt;
  throw TemplateError("unknown task '" + std::string(name) + "'");
}

/// Placeholder values; a list is joined with ", " in the given order.
using TemplateRecord = std::map<std::string, std::vector<std::string>>;

/// Replaces every {name} in `pattern` with the joined values of record[name].
inline std::string fill_pattern(std::string_view pattern, const TemplateRecord& record) {
  std::string out;
  std::size_t pos = 0;
  while (pos < pattern.size()) {
    const std::size_t open = pattern.find('{', pos);
    if (open == std::string_view::npos) {
      out.append(pattern.substr(pos));
      break;
    }
    const std::size_t close = pattern.find('}', open);
    if (close == std::string_view::npos) throw TemplateError("unterminated placeholder in '" + std::string(pattern) + "'");
    out.append(pattern.substr(pos, open - pos));
    const std::string key(pattern.substr(open + 1, close - open - 1));
    auto it = record.find(key);
    if (it == record.end() || it->second.empty()) throw TemplateError("missing value for placeholder {" + key + "}");
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      if (i) out += ", ";
      out += it->second[i];
    }
    pos = close + 1;
  }
  return out;
}

struct Instantiated {
  std::string input_text;
  std::string output_text;
};

inline Instantiated instantiate_template(const TaskTemplate& t, const TemplateRecord& record) {
  Instantiated r{fill_pattern(t.input_prompt, record), fill_pattern(t.output_pattern, record)};
  if (r.output_text.empty()) throw TemplateError("template '" + std::string(t.name) + "' produced empty output");
  return r;
}

}  // namespace pengi::train
