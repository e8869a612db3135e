#pragma once

#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pengi/core/error.hpp"
#include "pengi/core/rng.hpp"

namespace pengi::eval {

/// FNV-1a 64-bit digest as 16 lowercase hex digits.
inline std::string hex_digest(std::string_view bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(bytes);
  return os.str();
}

/// One metric over one task with the per-example evidence behind it.
struct EvalReport {
  std::string task;
  std::string metric;
  double value = 0.0;
  nlohmann::json records = nlohmann::json::array();
  std::string fingerprint;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"task", task},       {"metric", metric},     {"value", value}, {"fingerprint", fingerprint},
            {"seed", seed},       {"records", records},   {"extra", extra}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    try {
      EvalReport r;
      r.task = j.at("task").get<std::string>();
      r.metric = j.at("metric").get<std::string>();
      r.value = j.at("value").get<double>();
      r.fingerprint = j.at("fingerprint").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.records = j.at("records");
      r.extra = j.value("extra", nlohmann::json::object());
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed report: ") + e.what());
    }
  }
};

/// Accuracy recomputed from records carrying a boolean "correct" field.
inline double accuracy_from_records(const EvalReport& r) {
  if (r.records.empty()) throw DataError("report has no records");
  std::size_t hit = 0;
  for (const auto& rec : r.records) hit += rec.at("correct").get<bool>() ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(r.records.size());
}

/// One row per report: task,metric,value,fingerprint,seed.
inline std::string reports_csv(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os << "task,metric,value,fingerprint,seed\n";
  os << std::setprecision(17);
  for (const auto& r : reports) os << r.task << ',' << r.metric << ',' << r.value << ',' << r.fingerprint << ',' << r.seed << '\n';
  return os.str();
}

}  // namespace pengi::eval
