#pragma once

// The trainable student: a language-model backend plus, for adaptive
// thinking, a perception module whose soft prompt steers the backend.

#include <atm/decode.hpp>
#include <atm/losses.hpp>
#include <atm/model.hpp>
#include <atm/perception.hpp>
#include <atm/sequences.hpp>
#include <atm/tokenizer.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atm {

template <typename T>
struct Student {
  TinyTransformer<T> slm;
  std::optional<PerceptionModule<T>> perception;
  std::vector<Feature> features{Feature::word_count};

  bool adaptive() const { return perception.has_value() && perception->prefix_tokens() > 0; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps = slm.parameters();
    if (perception) {
      for (Parameter<T>* p : perception->parameters()) ps.push_back(p);
    }
    return ps;
  }

  std::vector<const Parameter<T>*> parameters() const {
    auto ps = const_cast<Student*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  // Ids fed to the perception module: question tokens followed by features.
  TokenIds perception_input(const Tokenizer& tok, std::string_view question) const {
    TokenIds ids = tok.encode(question);
    auto ppl = [&](std::string_view q) { return question_perplexity(slm, tok, q); };
    FeatureTokens f = build_features(question, features, tok, ppl);
    ids.insert(ids.end(), f.ids.begin(), f.ids.end());
    return ids;
  }

  std::optional<Var> prefix(Tape<T>& tape, std::span<const TokenId> perception_ids) {
    if (!adaptive()) return std::nullopt;
    return perception->perceive(tape, slm.embed_tokens(tape, perception_ids));
  }

  std::optional<Mat<T>> prefix_value(const Tokenizer& tok, std::string_view question) const {
    if (!adaptive()) return std::nullopt;
    const TokenIds ids = perception_input(tok, question);
    Mat<T> d(static_cast<Eigen::Index>(ids.size()), slm.config().hidden);
    const Mat<T>& table = slm.token_embedding().value;
    for (std::size_t i = 0; i < ids.size(); ++i) d.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
    return attach_prefix(perception->perceive(d), slm.config());
  }

  // weight * summed next-token loss over the example's scored positions.
  Var loss(Tape<T>& tape, const ShiftedExample& ex, std::span<const TokenId> perception_ids, T weight) {
    std::optional<Var> p = prefix(tape, perception_ids);
    Var logits = slm.forward(tape, ex.inputs, p);
    return tape.cross_entropy_sum(logits, ex.targets, ex.mask, weight);
  }

  // Teacher-forced logits for a full token sequence (for scoring).
  Mat<T> logits(const Tokenizer& tok, std::string_view question, std::span<const TokenId> inputs,
                AttentionCapture<T>* capture = nullptr) const {
    std::optional<Mat<T>> p = prefix_value(tok, question);
    return slm.logits(inputs, p ? &*p : nullptr, capture);
  }

  DecodeResult generate(const Tokenizer& tok, std::string_view question, const DecodeOptions& options) const {
    const TokenIds prompt = tok.encode(question);
    std::optional<Mat<T>> p = prefix_value(tok, question);
    return greedy_decode(slm, prompt, p ? &*p : nullptr, options);
  }
};

}  // namespace atm
