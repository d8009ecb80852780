#pragma once

// Synthetic symbolic reasoning tasks with templated golden rationales, and
// JSONL persistence for any corpus.

#include <atm/error.hpp>
#include <atm/sample.hpp>

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace atm {

inline constexpr std::array<std::string_view, 32> kFirstNames = {
    "Amy",  "Bob",   "Carl", "Dana",  "Eve",   "Frank", "Gina", "Hank", "Ivy",   "Jack",  "Kate",
    "Liam", "Mia",   "Noah", "Olga",  "Paul",  "Quinn", "Rosa", "Sam",  "Tina",  "Uma",   "Vince",
    "Wes",  "Xena",  "Yara", "Zack",  "Ben",   "Cleo",  "Dev",  "Ella", "Finn",  "Gus"};

inline constexpr std::array<std::string_view, 24> kLastNames = {
    "Brown", "Smith", "Lopez", "Nguyen", "Patel", "Kim",   "Garcia", "Chen",
    "Jones", "Adams", "Baker", "Clark",  "Davis", "Evans", "Fisher", "Green",
    "Hall",  "Irwin", "Jung",  "Klein",  "Lewis", "Moore", "Novak",  "Ortiz"};

struct CoinFlipStep {
  std::string actor;
  bool flips = false;
};

// A coin that starts heads up ends heads up iff it was flipped an even
// number of times.
inline Sample coin_flip_sample(std::string id, const std::vector<CoinFlipStep>& steps) {
  std::string q = "A coin is heads up.";
  std::string r = "The coin starts heads up.";
  bool heads = true;
  for (const CoinFlipStep& s : steps) {
    if (s.flips) {
      heads = !heads;
      q += " " + s.actor + " flips the coin.";
      r += " " + s.actor + " flips the coin, so it is now " + (heads ? "heads" : "tails") + " up.";
    } else {
      q += " " + s.actor + " does not flip the coin.";
      r += " " + s.actor + " does not flip the coin, so it stays " + (heads ? "heads" : "tails") + " up.";
    }
  }
  q += " Is the coin still heads up?";
  const std::string answer = heads ? "yes" : "no";
  r += std::string(" The coin ends ") + (heads ? "heads" : "tails") + " up, so the answer is " + answer + ".";
  Sample s;
  s.id = std::move(id);
  s.question = std::move(q);
  s.answer = answer;
  s.rationale = std::move(r);
  s.source = SampleSource::synthetic;
  s.extra["steps"] = steps.size();
  return s;
}

// min_steps..max_steps people each flip or do not flip the coin (fair choice).
inline Dataset gen_coin_flip(std::size_t n, int min_steps, int max_steps, std::uint64_t seed) {
  if (min_steps < 1 || max_steps > 8 || min_steps > max_steps) {
    throw ConfigError("coin-flip step range must lie within [1, 8]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> steps_dist(min_steps, max_steps);
  std::bernoulli_distribution flip(0.5);
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = steps_dist(rng);
    std::vector<std::string_view> pool(kFirstNames.begin(), kFirstNames.end());
    std::vector<CoinFlipStep> steps;
    for (int j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const std::size_t at = pick(rng);
      steps.push_back({std::string(pool[at]), flip(rng)});
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(at));
    }
    out.push_back(coin_flip_sample("coin-flip-" + std::to_string(seed) + "-" + std::to_string(i), steps));
  }
  return out;
}

inline Sample last_letter_sample(std::string id, const std::vector<std::string>& words) {
  std::string joined;
  std::string answer;
  std::string r;
  for (const std::string& w : words) {
    if (w.empty()) throw InputError("last-letter word list contains an empty word");
    if (!joined.empty()) joined += ' ';
    joined += w;
    answer += w.back();
    if (!r.empty()) r += ' ';
    r += "The last letter of " + w + " is " + std::string(1, w.back()) + ".";
  }
  r += " Concatenating them gives " + answer + ", so the answer is " + answer + ".";
  Sample s;
  s.id = std::move(id);
  s.question = "Take the last letters of the words in \"" + joined + "\" and concatenate them.";
  s.answer = answer;
  s.rationale = std::move(r);
  s.source = SampleSource::synthetic;
  s.extra["steps"] = words.size();
  return s;
}

inline Dataset gen_last_letter(std::size_t n, int min_words, int max_words, std::uint64_t seed) {
  if (min_words < 1 || min_words > max_words) throw ConfigError("last-letter word range must be 1 <= min <= max");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(min_words, max_words);
  std::uniform_int_distribution<std::size_t> first(0, kFirstNames.size() - 1);
  std::uniform_int_distribution<std::size_t> last(0, kLastNames.size() - 1);
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = count(rng);
    std::vector<std::string> words;
    for (int j = 0; j < k; ++j) {
      words.emplace_back(j % 2 == 0 ? kFirstNames[first(rng)] : kLastNames[last(rng)]);
    }
    out.push_back(last_letter_sample("last-letter-" + std::to_string(seed) + "-" + std::to_string(i), words));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["question"] = s.question;
  j["answer"] = s.answer;
  if (s.rationale) j["rationale"] = *s.rationale;
  if (s.mode) j["mode"] = *s.mode;
  j["source"] = to_string(s.source);
  for (const auto& [k, v] : s.extra.items()) j[k] = v;
  return j;
}

inline Sample sample_from_json(const nlohmann::ordered_json& j, std::size_t line) {
  auto where = [&] { return "line " + std::to_string(line) + ": "; };
  if (!j.is_object()) throw InputError(where() + "expected a JSON object");
  auto text = [&](const char* key, bool required) -> std::optional<std::string> {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) {
      if (required) throw InputError(where() + "missing required field \"" + key + "\"");
      return std::nullopt;
    }
    if (!it->is_string()) throw InputError(where() + "field \"" + key + "\" must be a string");
    return it->get<std::string>();
  };
  Sample s;
  s.id = text("id", false).value_or("line-" + std::to_string(line));
  s.question = *text("question", true);
  s.answer = *text("answer", true);
  if (s.answer.empty()) throw InputError(where() + "field \"answer\" is empty");
  s.rationale = text("rationale", false);
  if (auto it = j.find("mode"); it != j.end() && !it->is_null()) {
    if (!it->is_number_integer() || (it->get<int>() != 0 && it->get<int>() != 1)) {
      throw InputError(where() + "field \"mode\" must be 0 or 1");
    }
    s.mode = it->get<int>();
  }
  if (auto src = text("source", false)) {
    if (*src == "synthetic") {
      s.source = SampleSource::synthetic;
    } else if (*src == "teacher") {
      s.source = SampleSource::teacher;
    } else if (*src == "ingested") {
      s.source = SampleSource::ingested;
    } else {
      throw InputError(where() + "unknown source \"" + *src + "\"");
    }
  }
  for (const auto& [k, v] : j.items()) {
    if (k == "id" || k == "question" || k == "answer" || k == "rationale" || k == "mode" || k == "source") continue;
    s.extra[k] = v;
  }
  return s;
}

inline Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  Dataset out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(path.string() + ": line " + std::to_string(n) + ": malformed JSON (" + e.what() + ")");
    }
    try {
      out.push_back(sample_from_json(j, n));
    } catch (const InputError& e) {
      throw InputError(path.string() + ": " + e.what());
    }
  }
  return out;
}

inline void save_jsonl(const std::filesystem::path& path, const Dataset& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  for (const Sample& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw InputError("write failed for " + path.string());
}

}  // namespace atm
