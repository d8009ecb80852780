#pragma once

// Loss-masked training targets for the standard, pre-thinking and
// post-thinking objectives, and the inverse: reading mode and answer back
// out of generated token streams.
//
//   standard: question <ans> y </ans> <eos>
//   pre:      question <rat> r </rat> <ans> y </ans> <eos>
//   post:     question <ans> y </ans> <rat> r </rat> <eos>

#include <atm/error.hpp>
#include <atm/sample.hpp>
#include <atm/tokenizer.hpp>

#include <algorithm>
#include <cctype>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atm {

enum class ThinkingMode { standard, pre, post };

inline const char* to_string(ThinkingMode m) {
  switch (m) {
    case ThinkingMode::standard: return "standard";
    case ThinkingMode::pre: return "pre";
    case ThinkingMode::post: return "post";
  }
  return "standard";
}

// Half-open [begin, end) token range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct TargetSequence {
  TokenIds ids;
  std::vector<bool> mask;  // true = scored
  ThinkingMode mode = ThinkingMode::standard;
  Span question;
  Span answer;
  std::optional<Span> rationale;
  std::vector<std::size_t> markers;

  // Mask that scores only answer and rationale tokens (no markers).
  std::vector<bool> content_mask() const {
    std::vector<bool> m(ids.size(), false);
    for (std::size_t i = answer.begin; i < answer.end; ++i) m[i] = true;
    if (rationale) {
      for (std::size_t i = rationale->begin; i < rationale->end; ++i) m[i] = true;
    }
    return m;
  }
};

inline constexpr int kDefaultMaxRationaleTokens = 300;

namespace detail {

class SequenceWriter {
 public:
  explicit SequenceWriter(TargetSequence& seq) : seq_(seq) {}

  Span append(std::span<const TokenId> ids, bool scored) {
    Span s{seq_.ids.size(), seq_.ids.size() + ids.size()};
    seq_.ids.insert(seq_.ids.end(), ids.begin(), ids.end());
    seq_.mask.insert(seq_.mask.end(), ids.size(), scored);
    return s;
  }

  void marker(TokenId id) {
    seq_.markers.push_back(seq_.ids.size());
    seq_.ids.push_back(id);
    seq_.mask.push_back(true);
  }

 private:
  TargetSequence& seq_;
};

inline TokenIds encode_nonempty(const Tokenizer& tok, const std::string& text, const char* what,
                                const std::string& id) {
  TokenIds ids = tok.encode(text);
  if (ids.empty()) throw InputError(std::string("sample ") + id + ": empty " + what);
  return ids;
}

inline TokenIds encode_rationale(const Tokenizer& tok, const Sample& s, int max_tokens) {
  if (!s.rationale) throw InputError("sample " + s.id + ": missing rationale");
  TokenIds r = encode_nonempty(tok, *s.rationale, "rationale", s.id);
  if (max_tokens > 0 && static_cast<int>(r.size()) > max_tokens) r.resize(static_cast<std::size_t>(max_tokens));
  return r;
}

}  // namespace detail

inline TargetSequence build_standard(const Sample& s, const Tokenizer& tok) {
  const MarkerScheme& mk = tok.markers();
  TokenIds q = detail::encode_nonempty(tok, s.question, "question", s.id);
  TokenIds y = detail::encode_nonempty(tok, s.answer, "answer", s.id);
  TargetSequence seq;
  seq.mode = ThinkingMode::standard;
  detail::SequenceWriter w(seq);
  seq.question = w.append(q, false);
  w.marker(mk.answer_begin);
  seq.answer = w.append(y, true);
  w.marker(mk.answer_end);
  w.marker(mk.eos);
  return seq;
}

inline TargetSequence build_pre(const Sample& s, const Tokenizer& tok,
                                int max_rationale_tokens = kDefaultMaxRationaleTokens) {
  const MarkerScheme& mk = tok.markers();
  TokenIds q = detail::encode_nonempty(tok, s.question, "question", s.id);
  TokenIds y = detail::encode_nonempty(tok, s.answer, "answer", s.id);
  TokenIds r = detail::encode_rationale(tok, s, max_rationale_tokens);
  TargetSequence seq;
  seq.mode = ThinkingMode::pre;
  detail::SequenceWriter w(seq);
  seq.question = w.append(q, false);
  w.marker(mk.rationale_begin);
  seq.rationale = w.append(r, true);
  w.marker(mk.rationale_end);
  w.marker(mk.answer_begin);
  seq.answer = w.append(y, true);
  w.marker(mk.answer_end);
  w.marker(mk.eos);
  return seq;
}

inline TargetSequence build_post(const Sample& s, const Tokenizer& tok,
                                 int max_rationale_tokens = kDefaultMaxRationaleTokens) {
  const MarkerScheme& mk = tok.markers();
  TokenIds q = detail::encode_nonempty(tok, s.question, "question", s.id);
  TokenIds y = detail::encode_nonempty(tok, s.answer, "answer", s.id);
  TokenIds r = detail::encode_rationale(tok, s, max_rationale_tokens);
  TargetSequence seq;
  seq.mode = ThinkingMode::post;
  detail::SequenceWriter w(seq);
  seq.question = w.append(q, false);
  w.marker(mk.answer_begin);
  seq.answer = w.append(y, true);
  w.marker(mk.answer_end);
  w.marker(mk.rationale_begin);
  seq.rationale = w.append(r, true);
  w.marker(mk.rationale_end);
  w.marker(mk.eos);
  return seq;
}

inline TargetSequence build_target(ThinkingMode mode, const Sample& s, const Tokenizer& tok,
                                   int max_rationale_tokens = kDefaultMaxRationaleTokens) {
  switch (mode) {
    case ThinkingMode::pre: return build_pre(s, tok, max_rationale_tokens);
    case ThinkingMode::post: return build_post(s, tok, max_rationale_tokens);
    case ThinkingMode::standard: break;
  }
  return build_standard(s, tok);
}

// answer_first: the stream stopped right after the answer span (answer-only
// inference), so post-thinking and standard outputs cannot be told apart.
enum class DetectedMode { standard, pre, post, answer_first, malformed };

inline const char* to_string(DetectedMode m) {
  switch (m) {
    case DetectedMode::standard: return "standard";
    case DetectedMode::pre: return "pre";
    case DetectedMode::post: return "post";
    case DetectedMode::answer_first: return "answer_first";
    case DetectedMode::malformed: return "malformed";
  }
  return "malformed";
}

// Classifies a generated stream by the first marker it emits.
inline DetectedMode detect_mode(std::span<const TokenId> emitted, const MarkerScheme& mk) {
  auto first = std::find_if(emitted.begin(), emitted.end(), [&](TokenId t) { return mk.is_marker(t); });
  if (first == emitted.end()) return DetectedMode::malformed;
  if (*first == mk.rationale_begin) return DetectedMode::pre;
  if (*first != mk.answer_begin) return DetectedMode::malformed;
  for (auto it = std::next(first); it != emitted.end(); ++it) {
    if (*it == mk.rationale_begin) return DetectedMode::post;
    if (*it == mk.eos) return DetectedMode::standard;
    if (*it == mk.answer_end && std::next(it) == emitted.end()) return DetectedMode::answer_first;
  }
  return DetectedMode::malformed;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Canonical answer text: trimmed, trailing periods dropped, yes/no
// lowercased, numbers without thousands separators or trailing ".0".
inline std::string normalize_answer(std::string_view raw) {
  std::string s = trim(raw);
  while (!s.empty() && s.back() == '.') s.pop_back();
  s = trim(s);
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "yes" || lower == "no") return lower;

  std::string digits;
  bool numeric = !s.empty();
  int dots = 0;
  for (std::size_t i = 0; i < s.size() && numeric; ++i) {
    const char c = s[i];
    if (std::isdigit(static_cast<unsigned char>(c))) {
      digits += c;
    } else if (c == ',') {
      continue;
    } else if (c == '.' && dots == 0) {
      ++dots;
      digits += c;
    } else if ((c == '-' || c == '+') && i == 0) {
      if (c == '-') digits += c;
    } else {
      numeric = false;
    }
  }
  if (numeric && std::any_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    if (dots == 1) {
      while (digits.back() == '0') digits.pop_back();
      if (digits.back() == '.') digits.pop_back();
    }
    return digits;
  }
  return s;
}

// Normalised text of the first well-formed <ans> ... </ans> span.
inline std::optional<std::string> extract_answer(std::span<const TokenId> emitted, const Tokenizer& tok) {
  const MarkerScheme& mk = tok.markers();
  auto begin = std::find(emitted.begin(), emitted.end(), mk.answer_begin);
  if (begin == emitted.end()) return std::nullopt;
  auto end = std::find_if(std::next(begin), emitted.end(), [&](TokenId t) { return mk.is_marker(t); });
  if (end == emitted.end() || *end != mk.answer_end) return std::nullopt;
  const auto first = static_cast<std::size_t>(begin - emitted.begin()) + 1;
  const auto count = static_cast<std::size_t>(end - begin) - 1;
  std::string text = tok.decode(emitted.subspan(first, count));
  std::string norm = normalize_answer(text);
  if (norm.empty()) return std::nullopt;
  return norm;
}

}  // namespace atm
