#pragma once

// Rationale harvesting from a chat-completion teacher, answer-alignment
// filtering, and retention-rate subsampling.
//
// Cache layout: <cache_dir>/<h[0:2]>/<h>.json where h is the SHA-256 of
// model + "\n" + prompt. Each file holds {"model", "prompt", "response"}.

#include <atm/error.hpp>
#include <atm/manifest.hpp>
#include <atm/sample.hpp>
#include <atm/sequences.hpp>

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>
#include <vector>

namespace atm {

struct TeacherConfig {
  std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "gpt-3.5-turbo";
  std::string api_key_env = "ATM_TEACHER_API_KEY";
  double temperature = 0.0;
  int max_tokens = 512;
  std::filesystem::path cache_dir = "teacher-cache";
  bool cache_only = false;
  int max_retries = 4;
  int backoff_ms = 500;  // doubled after every failed attempt
  int parallelism = 4;
  int timeout_s = 60;
};

inline std::string teacher_prompt(const Sample& s) {
  std::string q = trim(s.question);
  return q + " Let's think step by step why the answer is " + s.answer;
}

inline std::string cache_key(const std::string& model, const std::string& prompt) {
  return sha256_hex(model + "\n" + prompt);
}

inline std::filesystem::path cache_file(const std::filesystem::path& dir, const std::string& key) {
  return dir / key.substr(0, 2) / (key + ".json");
}

inline std::optional<std::string> cache_lookup(const TeacherConfig& cfg, const std::string& prompt) {
  const auto path = cache_file(cfg.cache_dir, cache_key(cfg.model, prompt));
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    if (j.at("model") != cfg.model || j.at("prompt") != prompt) return std::nullopt;
    return j.at("response").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;  // unreadable entry: refetch and overwrite
  }
}

inline void cache_store(const TeacherConfig& cfg, const std::string& prompt, const std::string& response) {
  nlohmann::ordered_json j;
  j["model"] = cfg.model;
  j["prompt"] = prompt;
  j["response"] = response;
  write_file_atomic(cache_file(cfg.cache_dir, cache_key(cfg.model, prompt)), j.dump() + "\n");
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline Endpoint parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError("teacher endpoint must be an http(s) URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

class TeacherClient {
 public:
  explicit TeacherClient(TeacherConfig cfg) : cfg_(std::move(cfg)), endpoint_(parse_endpoint(cfg_.endpoint)) {
    if (const char* k = std::getenv(cfg_.api_key_env.c_str())) api_key_ = k;
  }

  const TeacherConfig& config() const { return cfg_; }

  // One completion, with retries on transport errors, 429 and 5xx.
  std::string complete(const std::string& prompt) const {
    httplib::Client client(endpoint_.origin);
    client.set_connection_timeout(cfg_.timeout_s);
    client.set_read_timeout(cfg_.timeout_s);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    nlohmann::json body;
    body["model"] = cfg_.model;
    body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
    body["temperature"] = cfg_.temperature;
    body["max_tokens"] = cfg_.max_tokens;
    const std::string payload = body.dump();

    std::string last_error;
    int delay = cfg_.backoff_ms;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
      }
      auto res = client.Post(endpoint_.path, headers, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 402 || (res->status == 429 && res->body.find("quota") != std::string::npos)) {
        throw NetworkError("teacher quota exceeded (HTTP " + std::to_string(res->status) + "): " + res->body);
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw NetworkError("teacher request failed with HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      try {
        const auto j = nlohmann::json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw NetworkError(std::string("malformed teacher response: ") + e.what());
      }
    }
    throw NetworkError("teacher unreachable after " + std::to_string(cfg_.max_retries + 1) + " attempts (" +
                       last_error + ")");
  }

 private:
  TeacherConfig cfg_;
  Endpoint endpoint_;
  std::string api_key_;
};

struct HarvestStats {
  long requests = 0;
  long cache_hits = 0;
};

// Fills the rationale of every sample from cache or teacher.
inline Dataset harvest(const Dataset& samples, const TeacherConfig& cfg, HarvestStats* stats = nullptr) {
  if (cfg.parallelism < 1) throw ConfigError("teacher parallelism must be at least 1");
  Dataset out = samples;
  std::vector<std::size_t> misses;
  HarvestStats local;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (auto hit = cache_lookup(cfg, teacher_prompt(out[i]))) {
      out[i].rationale = *hit;
      out[i].source = SampleSource::teacher;
      ++local.cache_hits;
    } else {
      misses.push_back(i);
    }
  }
  if (!misses.empty() && cfg.cache_only) {
    throw NetworkError("cache-only mode: " + std::to_string(misses.size()) + " samples are not cached (first: " +
                       out[misses.front()].id + ")");
  }
  const TeacherClient client(cfg);
  std::atomic<std::size_t> next{0};
  std::atomic<long> requests{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed) {
      const std::size_t k = next++;
      if (k >= misses.size()) return;
      Sample& s = out[misses[k]];
      try {
        const std::string prompt = teacher_prompt(s);
        ++requests;
        const std::string response = client.complete(prompt);
        cache_store(cfg, prompt, response);
        s.rationale = response;
        s.source = SampleSource::teacher;
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  const int n = std::min<int>(cfg.parallelism, static_cast<int>(misses.size()));
  std::vector<std::thread> threads;
  for (int t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  local.requests = requests;
  if (stats) *stats = local;
  if (error) std::rethrow_exception(error);
  return out;
}

// The answer a rationale concludes with, found by the pattern that suits the
// gold answer's type: last yes/no, last number, last option letter, or the
// text after the last "answer is".
inline std::optional<std::string> concluding_answer(const std::string& rationale, const std::string& gold) {
  const std::string g = normalize_answer(gold);
  auto last_match = [&](const std::regex& re, int group) -> std::optional<std::string> {
    std::optional<std::string> found;
    for (auto it = std::sregex_iterator(rationale.begin(), rationale.end(), re); it != std::sregex_iterator(); ++it) {
      found = (*it)[group].str();
    }
    return found;
  };
  if (g == "yes" || g == "no") {
    static const std::regex yn(R"(\b(yes|no|Yes|No|YES|NO)\b)");
    if (auto m = last_match(yn, 1)) return normalize_answer(*m);
    return std::nullopt;
  }
  static const std::regex number(R"(-?\d[\d,]*(?:\.\d+)?)");
  if (std::regex_match(g, number)) {
    if (auto m = last_match(number, 0)) return normalize_answer(*m);
    return std::nullopt;
  }
  static const std::regex letter_gold(R"([A-Ea-e])");
  if (std::regex_match(g, letter_gold)) {
    static const std::regex option(R"(\(([A-Ea-e])\)|answer is:?\s*\(?([A-Ea-e])\b)");
    std::optional<std::string> found;
    for (auto it = std::sregex_iterator(rationale.begin(), rationale.end(), option); it != std::sregex_iterator();
         ++it) {
      found = (*it)[1].matched ? (*it)[1].str() : (*it)[2].str();
    }
    if (found) {
      std::string up = *found;
      std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
      return normalize_answer(up);
    }
    return std::nullopt;
  }
  static const std::regex answer_is(R"(answer is:?\s*([^\n]+?)\s*(?:\.\s|\.$|\n|$))");
  if (auto m = last_match(answer_is, 1)) return normalize_answer(*m);
  return std::nullopt;
}

struct FilterResult {
  Dataset retained;
  std::vector<std::pair<std::string, std::string>> dropped;  // id, reason
  double retention_rate = 0.0;
};

inline FilterResult filter_aligned(const Dataset& samples) {
  FilterResult r;
  for (const Sample& s : samples) {
    if (!s.rationale) {
      r.dropped.emplace_back(s.id, "no rationale");
      continue;
    }
    const auto found = concluding_answer(*s.rationale, s.answer);
    std::string gold = normalize_answer(s.answer);
    if (gold.size() == 1 && std::isalpha(static_cast<unsigned char>(gold[0]))) {
      gold[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(gold[0])));
    }
    if (!found) {
      r.dropped.emplace_back(s.id, "no concluding answer found");
    } else if (*found != gold) {
      r.dropped.emplace_back(s.id, "concludes \"" + *found + "\" but the answer is \"" + s.answer + "\"");
    } else {
      r.retained.push_back(s);
    }
  }
  r.retention_rate = samples.empty() ? 1.0 : static_cast<double>(r.retained.size()) / static_cast<double>(samples.size());
  return r;
}

// Keeps round(n * percent / 100) samples chosen uniformly under seed, in
// their original order.
inline Dataset subsample(const Dataset& samples, double percent, std::uint64_t seed) {
  if (!(percent > 0.0 && percent <= 100.0)) throw ConfigError("retention percent must lie in (0, 100]");
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(samples.size()) * percent / 100.0));
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  Dataset out;
  for (std::size_t i : idx) out.push_back(samples[i]);
  return out;
}

}  // namespace atm
