#include <atm/tasks.hpp>
#include <atm/teacher.hpp>

#include "mock_teacher.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <mutex>

namespace {

using namespace atm;
using atm::testing::MockTeacher;
using atm::testing::reply;
using atm::testing::canned;

TeacherConfig config_for(const MockTeacher& m, const std::string& cache) {
  TeacherConfig c;
  c.endpoint = m.endpoint();
  c.cache_dir = std::filesystem::temp_directory_path() / "atm-test-teacher" / cache;
  std::filesystem::remove_all(c.cache_dir);
  c.backoff_ms = 1;
  c.timeout_s = 5;
  return c;
}

Dataset questions(std::size_t n) {
  Dataset d = gen_coin_flip(n, 1, 2, 17);
  for (Sample& s : d) s.rationale.reset();
  return d;
}

TEST(Prompt, AppendsAnswerCue) {
  Sample s;
  s.question = "  Is it up? ";
  s.answer = "yes";
  EXPECT_EQ(teacher_prompt(s), "Is it up? Let's think step by step why the answer is yes");
}

TEST(Harvest, StoresResponsesVerbatimAndCaches) {
  MockTeacher mock([](const nlohmann::json& b, httplib::Response& res) { reply(res, canned(b)); });
  const TeacherConfig cfg = config_for(mock, "cache");
  const Dataset d = questions(6);
  HarvestStats first;
  const Dataset out = harvest(d, cfg, &first);
  EXPECT_EQ(first.requests, 6);
  EXPECT_EQ(first.cache_hits, 0);
  for (const Sample& s : out) {
    EXPECT_EQ(*s.rationale, "Rationale for: " + teacher_prompt(s));
    EXPECT_EQ(s.source, SampleSource::teacher);
  }

  HarvestStats second;
  EXPECT_EQ(harvest(d, cfg, &second), out);
  EXPECT_EQ(second.requests, 0);
  EXPECT_EQ(second.cache_hits, 6);
  EXPECT_EQ(mock.requests(), 6);

  TeacherConfig offline = cfg;
  offline.cache_only = true;
  offline.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  EXPECT_EQ(harvest(d, offline), out);
}

TEST(Harvest, RequestBodyCarriesSettings) {
  nlohmann::json seen;
  std::mutex mu;
  MockTeacher mock([&](const nlohmann::json& b, httplib::Response& res) {
    std::lock_guard<std::mutex> lock(mu);
    seen = b;
    reply(res, "ok");
  });
  TeacherConfig cfg = config_for(mock, "body");
  cfg.model = "teacher-x";
  cfg.max_tokens = 77;
  harvest(questions(1), cfg);
  EXPECT_EQ(seen.at("model"), "teacher-x");
  EXPECT_EQ(seen.at("max_tokens"), 77);
  EXPECT_EQ(seen.at("temperature"), 0.0);
}

TEST(Harvest, ParallelismIsBounded) {
  MockTeacher mock([](const nlohmann::json& b, httplib::Response& res) { reply(res, canned(b)); });
  TeacherConfig cfg = config_for(mock, "parallel");
  cfg.parallelism = 2;
  harvest(questions(10), cfg);
  EXPECT_LE(mock.max_in_flight(), 2);
  EXPECT_GE(mock.max_in_flight(), 1);
  EXPECT_EQ(mock.requests(), 10);
}

TEST(Harvest, CacheOnlyMissIsAnError) {
  MockTeacher mock([](const nlohmann::json& b, httplib::Response& res) { reply(res, canned(b)); });
  TeacherConfig cfg = config_for(mock, "miss");
  cfg.cache_only = true;
  EXPECT_THROW(harvest(questions(2), cfg), NetworkError);
  EXPECT_EQ(mock.requests(), 0);
}

TEST(Harvest, RetriesTransientFailures) {
  std::atomic<int> calls{0};
  MockTeacher mock([&](const nlohmann::json& b, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = calls == 1 ? 503 : 429;
      res.set_content("slow down", "text/plain");
      return;
    }
    reply(res, canned(b));
  });
  TeacherConfig cfg = config_for(mock, "retry");
  cfg.parallelism = 1;
  const Dataset out = harvest(questions(1), cfg);
  EXPECT_EQ(mock.requests(), 3);
  EXPECT_TRUE(out[0].rationale.has_value());
}

TEST(Harvest, GivesUpAfterRetryBudget) {
  MockTeacher mock([](const nlohmann::json&, httplib::Response& res) { res.status = 500; });
  TeacherConfig cfg = config_for(mock, "budget");
  cfg.max_retries = 2;
  EXPECT_THROW(harvest(questions(1), cfg), NetworkError);
  EXPECT_EQ(mock.requests(), 3);
}

TEST(Harvest, QuotaErrorsAreNotRetried) {
  MockTeacher mock([](const nlohmann::json&, httplib::Response& res) {
    res.status = 429;
    res.set_content(R"({"error":{"code":"insufficient_quota"}})", "application/json");
  });
  TeacherConfig cfg = config_for(mock, "quota");
  cfg.parallelism = 1;
  EXPECT_THROW(harvest(questions(1), cfg), NetworkError);
  EXPECT_EQ(mock.requests(), 1);
}

TEST(Harvest, ClientErrorsAndBadEndpoints) {
  MockTeacher mock([](const nlohmann::json&, httplib::Response& res) { res.status = 401; });
  const TeacherConfig cfg = config_for(mock, "unauthorised");
  EXPECT_THROW(harvest(questions(1), cfg), NetworkError);
  EXPECT_EQ(mock.requests(), 1);
  TeacherConfig bad = cfg;
  bad.endpoint = "ftp://example";
  EXPECT_THROW(harvest(questions(1), bad), ConfigError);
}

TEST(Filter, RetainsOnlyAlignedRationales) {
  auto make = [](std::string id, std::string answer, std::optional<std::string> r) {
    Sample s;
    s.id = std::move(id);
    s.question = "q?";
    s.answer = std::move(answer);
    s.rationale = std::move(r);
    return s;
  };
  const Dataset d{
      make("yes-ok", "yes", "It is flipped twice, so yes."),
      make("yes-last", "yes", "No flips happen at first. After two flips the answer is Yes."),
      make("no-wrong", "no", "So the answer is yes."),
      make("num-ok", "1000", "Add 600 and 400 to get 1,000."),
      make("num-wrong", "12", "3 times 5 is 15."),
      make("letter-ok", "B", "Option (A) is wrong, so the answer is (B)."),
      make("letter-lower", "c", "Thus the answer is C."),
      make("text-ok", "yn", "Concatenating gives yn, so the answer is yn."),
      make("no-answer", "ab", "I am not sure."),
      make("missing", "yes", std::nullopt),
  };
  const FilterResult r = filter_aligned(d);
  std::vector<std::string> kept;
  for (const Sample& s : r.retained) kept.push_back(s.id);
  EXPECT_EQ(kept, (std::vector<std::string>{"yes-ok", "yes-last", "num-ok", "letter-ok", "letter-lower", "text-ok"}));
  ASSERT_EQ(r.dropped.size(), 4u);
  EXPECT_EQ(r.dropped[0].first, "no-wrong");
  EXPECT_NEAR(r.retention_rate, 0.6, 1e-12);
}

TEST(Subsample, RetentionLevels) {
  const Dataset d = gen_coin_flip(200, 1, 3, 2);
  for (double pct : {100.0, 75.0, 50.0, 25.0, 12.5}) {
    const Dataset kept = subsample(d, pct, 9);
    EXPECT_NEAR(static_cast<double>(kept.size()), 200.0 * pct / 100.0, 1.0) << pct;
    EXPECT_EQ(subsample(d, pct, 9), kept);
    for (std::size_t i = 1; i < kept.size(); ++i) {
      EXPECT_LT(std::stoul(kept[i - 1].id.substr(kept[i - 1].id.rfind('-') + 1)),
                std::stoul(kept[i].id.substr(kept[i].id.rfind('-') + 1)));
    }
  }
  EXPECT_EQ(subsample(d, 100.0, 1), d);
  EXPECT_THROW(subsample(d, 0.0, 1), ConfigError);
  EXPECT_THROW(subsample(d, 101.0, 1), ConfigError);
}

}  // namespace
