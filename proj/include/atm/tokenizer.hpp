#pragma once

// Word/character hybrid tokenizer.
//
// Text is split on whitespace into chunks, and each chunk into alphanumeric
// runs and single punctuation characters. A piece that starts a chunk is
// marked with a leading "\xe2\x96\x81" (U+2581), as in SentencePiece. Runs found in
// the word vocabulary become one token; anything else is spelled with
// character tokens, so every ASCII string round-trips up to whitespace
// normalisation.

#include <atm/error.hpp>
#include <atm/tensor.hpp>

#include <algorithm>
#include <cctype>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace atm {

// Reserved ids; ordinary text never encodes to any of them.
struct MarkerScheme {
  TokenId pad = 0;
  TokenId unk = 1;
  TokenId answer_begin = 2;
  TokenId answer_end = 3;
  TokenId rationale_begin = 4;
  TokenId rationale_end = 5;
  TokenId eos = 6;

  bool is_marker(TokenId id) const {
    return id == answer_begin || id == answer_end || id == rationale_begin || id == rationale_end || id == eos;
  }
};

inline constexpr std::string_view kSpaceMark = "\xe2\x96\x81";

class Tokenizer {
 public:
  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  // Builds the vocabulary from words occurring at least min_count times.
  static Tokenizer build(std::span<const std::string> corpus, int min_count = 1) {
    std::map<std::string, int> counts;
    for (const std::string& text : corpus) {
      for (const Piece& p : split(text)) {
        if (p.alnum && p.leading_space && p.text.size() > 1) ++counts[p.text];
      }
    }
    for (const char* w : {"number", "of", "words", "Perplexity"}) counts[w] += min_count;
    std::vector<std::string> words;
    for (const auto& [w, c] : counts) {
      if (c >= min_count) words.push_back(w);
    }
    return Tokenizer(words);
  }

  // Restores a tokenizer from its full token list (as saved by tokens()).
  static Tokenizer from_tokens(const std::vector<std::string>& tokens) {
    Tokenizer t;
    if (tokens.size() < t.tokens_.size() ||
        !std::equal(t.tokens_.begin(), t.tokens_.end(), tokens.begin())) {
      throw InputError("token list does not start with the reserved and character tokens");
    }
    std::vector<std::string> words;
    for (std::size_t i = t.tokens_.size(); i < tokens.size(); ++i) {
      const std::string& s = tokens[i];
      if (s.rfind(kSpaceMark, 0) != 0) throw InputError("word token without space mark: " + s);
      words.push_back(s.substr(kSpaceMark.size()));
    }
    return Tokenizer(words);
  }

  const MarkerScheme& markers() const { return markers_; }
  int vocab_size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenIds encode(std::string_view text) const {
    TokenIds out;
    for (const Piece& p : split(text)) {
      if (!p.alnum) {
        out.push_back(char_id(p.text[0], p.leading_space));
        continue;
      }
      if (p.leading_space) {
        auto it = ids_.find(std::string(kSpaceMark) + p.text);
        if (it != ids_.end()) {
          out.push_back(it->second);
          continue;
        }
      }
      for (std::size_t i = 0; i < p.text.size(); ++i) out.push_back(char_id(p.text[i], p.leading_space && i == 0));
    }
    return out;
  }

  // Markers and padding decode to nothing.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || id >= vocab_size()) throw InputError("invalid token id " + std::to_string(id));
      if (id < kReserved) {
        if (id == markers_.unk) out += " ?";
        continue;
      }
      const std::string& s = tokens_[static_cast<std::size_t>(id)];
      if (s.rfind(kSpaceMark, 0) == 0) {
        out += ' ';
        out += s.substr(kSpaceMark.size());
      } else {
        out += s;
      }
    }
    if (!out.empty() && out.front() == ' ') out.erase(0, 1);
    return out;
  }

  // Human-readable label for plots and dumps.
  std::string label(TokenId id) const {
    switch (id) {
      case 0: return "<pad>";
      case 1: return "<unk>";
      case 2: return "<ans>";
      case 3: return "</ans>";
      case 4: return "<rat>";
      case 5: return "</rat>";
      case 6: return "<eos>";
      default: break;
    }
    std::string s = token(id);
    if (s.rfind(kSpaceMark, 0) == 0) s = "_" + s.substr(kSpaceMark.size());
    return s;
  }

 private:
  static constexpr TokenId kReserved = 7;

  struct Piece {
    std::string text;
    bool leading_space = false;
    bool alnum = false;
  };

  explicit Tokenizer(const std::vector<std::string>& words) {
    tokens_ = {"<pad>", "<unk>", "<ans>", "</ans>", "<rat>", "</rat>", "<eos>"};
    for (int c = 33; c < 127; ++c) {
      tokens_.push_back(std::string(kSpaceMark) + static_cast<char>(c));
      tokens_.push_back(std::string(1, static_cast<char>(c)));
    }
    for (const std::string& w : words) tokens_.push_back(std::string(kSpaceMark) + w);
    for (std::size_t i = kReserved; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  TokenId char_id(char c, bool leading_space) const {
    const auto u = static_cast<unsigned char>(c);
    if (u < 33 || u >= 127) return markers_.unk;
    return kReserved + static_cast<TokenId>((u - 33) * 2 + (leading_space ? 0 : 1));
  }

  static bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

  static std::vector<Piece> split(std::string_view text) {
    std::vector<Piece> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      bool chunk_start = true;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
        Piece p;
        p.leading_space = chunk_start;
        chunk_start = false;
        if (is_alnum(text[i])) {
          const std::size_t start = i;
          while (i < text.size() && is_alnum(text[i])) ++i;
          p.text = std::string(text.substr(start, i - start));
          p.alnum = true;
        } else {
          p.text = std::string(1, text[i]);
          ++i;
        }
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  MarkerScheme markers_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace atm
