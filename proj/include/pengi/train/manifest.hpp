#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pengi/core/error.hpp"

namespace pengi::train {

/// One (audio, input text, output text) example. `audio` is relative to the
/// manifest directory unless absolute.
struct TrainingTriple {
  std::string audio;
  std::string task;
  std::string input_text;
  std::string output_text;
  std::vector<std::string> class_labels;
};

inline nlohmann::json to_json(const TrainingTriple& t) {
  nlohmann::json j;
  j["audio"] = t.audio;
  j["task"] = t.task;
  j["input_text"] = t.input_text;
  j["output_text"] = t.output_text;
  if (!t.class_labels.empty()) j["class_labels"] = t.class_labels;
  return j;
}

inline TrainingTriple triple_from_json(const nlohmann::json& j) {
  TrainingTriple t;
  try {
    t.audio = j.at("audio").get<std::string>();
    t.task = j.at("task").get<std::string>();
    t.input_text = j.at("input_text").get<std::string>();
    t.output_text = j.at("output_text").get<std::string>();
    if (j.contains("class_labels")) t.class_labels = j.at("class_labels").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest row: ") + e.what());
  }
  if (t.output_text.empty()) throw DataError("manifest row for " + t.audio + " has empty output_text");
  return t;
}

inline std::string manifest_text(const std::vector<TrainingTriple>& rows) {
  std::string out;
  for (const auto& r : rows) out += to_json(r).dump() + "\n";
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<TrainingTriple>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write manifest " + path.string());
  os << manifest_text(rows);
}

inline std::vector<TrainingTriple> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read manifest " + path.string());
  std::vector<TrainingTriple> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    rows.push_back(triple_from_json(j));
  }
  return rows;
}

inline std::filesystem::path resolve_audio(const std::filesystem::path& manifest, const TrainingTriple& t) {
  std::filesystem::path p(t.audio);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

}  // namespace pengi::train
