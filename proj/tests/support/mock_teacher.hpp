#pragma once

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <functional>
#include <string>
#include <thread>

namespace atm::testing {

// Local chat-completions stand-in; the handler decides each response.
class MockTeacher {
 public:
  using Handler = std::function<void(const nlohmann::json&, httplib::Response&)>;

  explicit MockTeacher(Handler h) : handler_(std::move(h)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {}
      ++requests_;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      handler_(nlohmann::json::parse(req.body), res);
      --in_flight_;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockTeacher() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  int requests() const { return requests_; }
  int max_in_flight() const { return max_in_flight_; }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::atomic<int> requests_{0};
};

inline void reply(httplib::Response& res, const std::string& content) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}});
  res.set_content(j.dump(), "application/json");
}

inline std::string canned(const nlohmann::json& body) {
  return "Rationale for: " + body.at("messages").at(0).at("content").get<std::string>();
}

}  // namespace atm::testing
