#pragma once

// Perception module: K learnable query tokens cross-attend over the
// question embedding (plus rendered feature tokens) and produce the K x H
// soft prompt that is injected as a prefix into every transformer layer.
//
//   Q = q W_Q,  Kd = d W_K,  Vd = d W_V
//   p = softmax(Q Kd^T) Vd + q          (per head, heads concatenated)

#include <atm/autodiff.hpp>
#include <atm/error.hpp>
#include <atm/losses.hpp>
#include <atm/model.hpp>
#include <atm/tokenizer.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace atm {

enum class Feature {
  word_count,
  readability,
  // Needs a dependency parser; declared so configs can name it, rejected at use.
  mean_dependency_distance,
};

inline const char* to_string(Feature f) {
  switch (f) {
    case Feature::word_count: return "word_count";
    case Feature::readability: return "readability";
    case Feature::mean_dependency_distance: return "mean_dependency_distance";
  }
  return "word_count";
}

inline Feature feature_from_string(const std::string& s) {
  if (s == "word_count") return Feature::word_count;
  if (s == "readability") return Feature::readability;
  if (s == "mean_dependency_distance") return Feature::mean_dependency_distance;
  throw ConfigError("unknown perception feature: " + s);
}

inline std::size_t word_count(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

struct FeatureTokens {
  std::string text;
  TokenIds ids;
};

// perplexity is only consulted when the readability feature is enabled.
inline FeatureTokens build_features(std::string_view question, std::span<const Feature> enabled,
                                    const Tokenizer& tok,
                                    const std::function<double(std::string_view)>& perplexity = {}) {
  if (trim(question).empty()) throw InputError("build_features: empty question");
  std::vector<std::string> parts;
  for (Feature f : enabled) {
    switch (f) {
      case Feature::word_count:
        parts.push_back("number of words: " + std::to_string(word_count(question)));
        break;
      case Feature::readability: {
        if (!perplexity) throw ConfigError("readability feature needs a perplexity model");
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.2f", perplexity(question));
        parts.push_back(std::string("Perplexity: ") + buf);
        break;
      }
      case Feature::mean_dependency_distance:
        throw ConfigError("the mean_dependency_distance feature requires a dependency parser and is not available");
    }
  }
  FeatureTokens out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out.text += ' ';
    out.text += parts[i];
  }
  out.ids = tok.encode(out.text);
  return out;
}

// exp of the mean next-token loss over the question's own tokens.
template <typename T>
double question_perplexity(const TinyTransformer<T>& model, const Tokenizer& tok, std::string_view question) {
  TokenIds ids = tok.encode(question);
  if (ids.size() < 2) return 1.0;
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  if (ids.size() > max_len) ids.resize(max_len);
  TokenIds inputs(ids.begin(), ids.end() - 1);
  TokenIds targets(ids.begin() + 1, ids.end());
  std::vector<bool> mask(targets.size(), true);
  return std::exp(nll_loss(model.logits(inputs), targets, mask));
}

struct PerceptionConfig {
  int prefix_tokens = 50;
  bool scaled_attention = false;
  std::vector<Feature> features{Feature::word_count};
};

template <typename T>
class PerceptionModule {
 public:
  PerceptionModule() = default;

  PerceptionModule(int prefix_tokens, int hidden, int heads, bool scaled_attention, std::uint64_t seed,
                   double init_std = 0.02)
      : heads_(heads), scaled_(scaled_attention) {
    if (prefix_tokens < 0 || hidden <= 0 || heads <= 0 || hidden % heads != 0) {
      throw ConfigError("invalid perception module shape");
    }
    Rng rng(seed);
    query_ = {"perception.q", normal_matrix<T>(prefix_tokens, hidden, init_std, rng), Mat<T>(), true};
    wq_ = {"perception.wq", normal_matrix<T>(hidden, hidden, init_std, rng), Mat<T>(), true};
    wk_ = {"perception.wk", normal_matrix<T>(hidden, hidden, init_std, rng), Mat<T>(), true};
    wv_ = {"perception.wv", normal_matrix<T>(hidden, hidden, init_std, rng), Mat<T>(), true};
  }

  int prefix_tokens() const { return static_cast<int>(query_.value.rows()); }
  int hidden() const { return static_cast<int>(query_.value.cols()); }
  int heads() const { return heads_; }
  bool scaled_attention() const { return scaled_; }

  std::vector<Parameter<T>*> parameters() { return {&query_, &wq_, &wk_, &wv_}; }
  std::vector<const Parameter<T>*> parameters() const { return {&query_, &wq_, &wk_, &wv_}; }

  Parameter<T>& query() { return query_; }
  Parameter<T>& w_q() { return wq_; }
  Parameter<T>& w_k() { return wk_; }
  Parameter<T>& w_v() { return wv_; }

  // d: L x H node on the same tape. Returns the K x H soft prompt.
  Var perceive(Tape<T>& tape, Var d, std::vector<Mat<T>>* probs = nullptr) {
    return perceive_impl(tape, tape.param(query_), tape.param(wq_), tape.param(wk_), tape.param(wv_), d, probs);
  }

  Mat<T> perceive(const Mat<T>& d, std::vector<Mat<T>>* probs = nullptr) const {
    Tape<T> tape;
    Var out = perceive_impl(tape, tape.constant(query_.value), tape.constant(wq_.value), tape.constant(wk_.value),
                            tape.constant(wv_.value), tape.constant(d), probs);
    return tape.value(out);
  }

 private:
  Var perceive_impl(Tape<T>& tape, Var q, Var wq, Var wk, Var wv, Var d, std::vector<Mat<T>>* probs) const {
    const Mat<T>& dv = tape.value(d);
    if (dv.rows() < 1) throw InputError("perceive: empty input sequence");
    if (dv.cols() != hidden()) {
      throw InputError("perceive: input width " + std::to_string(dv.cols()) + " does not match hidden size " +
                       std::to_string(hidden()));
    }
    const T scale = scaled_ ? T(1) / std::sqrt(static_cast<T>(hidden() / heads_)) : T(1);
    Var attended = tape.attention(tape.matmul(q, wq), tape.matmul(d, wk), tape.matmul(d, wv), heads_, false, scale,
                                  probs);
    return tape.add(attended, q);
  }

  int heads_ = 1;
  bool scaled_ = false;
  Parameter<T> query_, wq_, wk_, wv_;
};

// Validated K x H prefix ready for TinyTransformer::forward.
template <typename T>
Mat<T> attach_prefix(const Mat<T>& p, const ModelConfig& backend) {
  if (p.rows() > 0 && p.cols() != backend.hidden) {
    throw InputError("prefix is " + std::to_string(p.rows()) + "x" + std::to_string(p.cols()) +
                     ", backend hidden size is " + std::to_string(backend.hidden));
  }
  return p;
}

}  // namespace atm
