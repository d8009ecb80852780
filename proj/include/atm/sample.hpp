#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace atm {

enum class SampleSource { synthetic, ingested, teacher };

inline const char* to_string(SampleSource s) {
  switch (s) {
    case SampleSource::synthetic: return "synthetic";
    case SampleSource::ingested: return "ingested";
    case SampleSource::teacher: return "teacher";
  }
  return "ingested";
}

// One (question, answer, rationale) record.
struct Sample {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<std::string> rationale;
  std::optional<int> mode;  // 1 = pre-think, 0 = post-think
  SampleSource source = SampleSource::ingested;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();  // unknown JSONL fields, preserved verbatim

  bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

}  // namespace atm
