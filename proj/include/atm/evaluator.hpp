#pragma once

// Accuracy, corpus BLEU, inference-efficiency reports, loss-gap tracking and
// attention-map export.

#include <atm/config.hpp>
#include <atm/decode.hpp>
#include <atm/error.hpp>
#include <atm/losses.hpp>
#include <atm/sample.hpp>
#include <atm/sequences.hpp>
#include <atm/student.hpp>
#include <atm/tokenizer.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace atm {

struct Confusion {
  long tp = 0;
  long tn = 0;
  long fp = 0;
  long fn = 0;

  long total() const { return tp + tn + fp + fn; }
  double accuracy() const {
    if (total() == 0) throw InputError("accuracy of an empty set");
    return static_cast<double>(tp + tn) / static_cast<double>(total());
  }
};

// Binary tasks use yes as the positive class. A missing prediction is wrong.
inline Confusion confusion(const std::vector<std::optional<std::string>>& predictions,
                           const std::vector<std::string>& golds) {
  if (predictions.size() != golds.size()) throw InputError("predictions and golds differ in length");
  Confusion c;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool gold_yes = normalize_answer(golds[i]) == "yes";
    const std::optional<std::string> p =
        predictions[i] ? std::optional<std::string>(normalize_answer(*predictions[i])) : std::nullopt;
    const bool pred_yes = p ? *p == "yes" : !gold_yes;
    if (gold_yes) (pred_yes ? c.tp : c.fn)++;
    else (pred_yes ? c.fp : c.tn)++;
  }
  return c;
}

inline bool is_binary_task(const std::vector<std::string>& golds) {
  return std::all_of(golds.begin(), golds.end(), [](const std::string& g) {
    const std::string n = normalize_answer(g);
    return n == "yes" || n == "no";
  });
}

inline double accuracy(const std::vector<std::optional<std::string>>& predictions,
                       const std::vector<std::string>& golds) {
  if (golds.empty()) throw InputError("accuracy of an empty set");
  if (predictions.size() != golds.size()) throw InputError("predictions and golds differ in length");
  if (is_binary_task(golds)) return confusion(predictions, golds).accuracy();
  long correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (predictions[i] && normalize_answer(*predictions[i]) == normalize_answer(golds[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(golds.size());
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Corpus BLEU-4 over whitespace tokens: uniform weights, brevity penalty,
// add-one smoothing of the 2..4-gram precisions.
inline double corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  if (candidates.empty()) throw InputError("BLEU of an empty corpus");
  if (candidates.size() != references.size()) throw InputError("BLEU: candidate and reference counts differ");
  constexpr int kMaxN = 4;
  double match[kMaxN] = {};
  double total[kMaxN] = {};
  double cand_len = 0;
  double ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = split_words(candidates[i]);
    const auto r = split_words(references[i]);
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (int n = 1; n <= kMaxN; ++n) {
      std::map<std::vector<std::string>, int> ref_counts;
      for (std::size_t j = 0; j + n <= r.size(); ++j) ++ref_counts[{r.begin() + j, r.begin() + j + n}];
      std::map<std::vector<std::string>, int> cand_counts;
      for (std::size_t j = 0; j + n <= c.size(); ++j) ++cand_counts[{c.begin() + j, c.begin() + j + n}];
      for (const auto& [gram, count] : cand_counts) {
        auto it = ref_counts.find(gram);
        match[n - 1] += std::min(count, it == ref_counts.end() ? 0 : it->second);
        total[n - 1] += count;
      }
    }
  }
  if (cand_len == 0 || match[0] == 0) return 0.0;
  double log_p = std::log(match[0] / total[0]);
  for (int n = 2; n <= kMaxN; ++n) log_p += std::log((match[n - 1] + 1.0) / (total[n - 1] + 1.0));
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p / kMaxN);
}

struct Prediction {
  std::string id;
  std::string gold;
  std::optional<std::string> answer;
  bool correct = false;
  DetectedMode mode = DetectedMode::malformed;
  TokenIds emitted;
  bool truncated = false;
  double seconds = 0.0;
};

// answer_only stops generation at the closing answer marker.
inline DecodeOptions inference_options(const Tokenizer& tok, int max_new_tokens, bool answer_only) {
  DecodeOptions o;
  o.max_new_tokens = max_new_tokens;
  o.stop_tokens = {tok.markers().eos};
  if (answer_only) o.stop_tokens.push_back(tok.markers().answer_end);
  return o;
}

template <typename T>
Prediction predict(const Student<T>& model, const Tokenizer& tok, const Sample& s, const DecodeOptions& options) {
  Prediction p;
  p.id = s.id;
  p.gold = s.answer;
  const auto t0 = std::chrono::steady_clock::now();
  DecodeResult r = model.generate(tok, s.question, options);
  p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  p.answer = extract_answer(r.tokens, tok);
  p.correct = p.answer && *p.answer == normalize_answer(s.answer);
  p.mode = detect_mode(r.tokens, tok.markers());
  p.emitted = std::move(r.tokens);
  p.truncated = r.truncated;
  return p;
}

template <typename T>
std::vector<Prediction> predict_all(const Student<T>& model, const Tokenizer& tok, const Dataset& samples,
                                    const DecodeOptions& options) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(predict(model, tok, s, options));
  return out;
}

inline double accuracy(const std::vector<Prediction>& predictions) {
  std::vector<std::optional<std::string>> p;
  std::vector<std::string> g;
  for (const Prediction& x : predictions) {
    p.push_back(x.answer);
    g.push_back(x.gold);
  }
  return accuracy(p, g);
}

struct EfficiencyRow {
  std::string inference;  // answer_only or full
  std::string mode;       // detected mode, or "all"
  long samples = 0;
  double mean_tokens = 0.0;
  double mean_seconds = 0.0;
};

inline std::vector<EfficiencyRow> summarize_efficiency(const std::string& inference,
                                                       const std::vector<Prediction>& preds) {
  std::map<std::string, EfficiencyRow> rows;
  for (const Prediction& p : preds) {
    for (const std::string& key : {std::string("all"), std::string(to_string(p.mode))}) {
      EfficiencyRow& r = rows[key];
      r.inference = inference;
      r.mode = key;
      ++r.samples;
      r.mean_tokens += static_cast<double>(p.emitted.size());
      r.mean_seconds += p.seconds;
    }
  }
  std::vector<EfficiencyRow> out;
  for (auto& [key, r] : rows) {
    r.mean_tokens /= static_cast<double>(r.samples);
    r.mean_seconds /= static_cast<double>(r.samples);
    out.push_back(r);
  }
  return out;
}

// Answer-only and full inference over the same set.
template <typename T>
std::vector<EfficiencyRow> efficiency_report(const Student<T>& model, const Tokenizer& tok, const Dataset& samples,
                                             int max_new_tokens) {
  if (samples.empty()) return {};
  auto rows = summarize_efficiency("answer_only",
                                   predict_all(model, tok, samples, inference_options(tok, max_new_tokens, true)));
  auto full = summarize_efficiency("full", predict_all(model, tok, samples, inference_options(tok, max_new_tokens, false)));
  rows.insert(rows.end(), full.begin(), full.end());
  return rows;
}

inline void write_efficiency_csv(std::ostream& out, const std::vector<EfficiencyRow>& rows) {
  out << "inference,mode,samples,mean_tokens,mean_seconds\n";
  for (const EfficiencyRow& r : rows) {
    out << r.inference << ',' << r.mode << ',' << r.samples << ',' << r.mean_tokens << ',' << r.mean_seconds << '\n';
  }
}

// One point of the loss-gap series: mean scored-token loss of the samples
// the model currently answers correctly vs incorrectly.
struct LossGapPoint {
  int epoch = 0;
  long correct = 0;
  long incorrect = 0;
  std::optional<double> loss_correct;
  std::optional<double> loss_incorrect;

  std::optional<double> gap() const {
    if (!loss_correct || !loss_incorrect) return std::nullopt;
    return *loss_incorrect - *loss_correct;
  }
};

template <typename T>
LossGapPoint loss_gap_point(const Student<T>& model, const Tokenizer& tok, const Dataset& eval, Objective objective,
                            int max_rationale_tokens, int max_new_tokens, int epoch) {
  LossGapPoint pt;
  pt.epoch = epoch;
  double sum_c = 0.0;
  double sum_i = 0.0;
  // Post and standard answers are complete at the closing answer marker.
  const bool answer_only = objective == Objective::post || objective == Objective::standard;
  const DecodeOptions options = inference_options(tok, max_new_tokens, answer_only);
  for (const Sample& s : eval) {
    ThinkingMode mode = ThinkingMode::standard;
    if (objective == Objective::pre) mode = ThinkingMode::pre;
    if (objective == Objective::post) mode = ThinkingMode::post;
    if (objective == Objective::atm) mode = s.mode && *s.mode == 1 ? ThinkingMode::pre : ThinkingMode::post;
    const ShiftedExample ex = shift(build_target(mode, s, tok, max_rationale_tokens));
    const double loss = nll_loss(model.logits(tok, s.question, ex.inputs), ex.targets, ex.mask);
    if (predict(model, tok, s, options).correct) {
      ++pt.correct;
      sum_c += loss;
    } else {
      ++pt.incorrect;
      sum_i += loss;
    }
  }
  if (pt.correct > 0) pt.loss_correct = sum_c / static_cast<double>(pt.correct);
  if (pt.incorrect > 0) pt.loss_incorrect = sum_i / static_cast<double>(pt.incorrect);
  return pt;
}

// Absent partitions are written as empty fields.
inline void write_loss_gap_csv(std::ostream& out, const std::vector<LossGapPoint>& points) {
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  out << "epoch,correct,incorrect,loss_correct,loss_incorrect,gap\n";
  for (const LossGapPoint& p : points) {
    out << p.epoch << ',' << p.correct << ',' << p.incorrect << ',' << opt(p.loss_correct) << ','
        << opt(p.loss_incorrect) << ',' << opt(p.gap()) << '\n';
  }
}

struct AttentionDump {
  std::vector<std::string> labels;  // one per key position, prefix slots first
  Mat<double> weights;              // heads x positions
  std::size_t query_position = 0;
  bool found_answer_marker = false;
};

// Final-layer attention of the position that emits the first answer token
// (the answer-begin marker), with entries below threshold set to zero.
template <typename T>
AttentionDump export_attention(const Student<T>& model, const Tokenizer& tok, const Sample& s, double threshold,
                               int max_new_tokens) {
  const TokenIds prompt = tok.encode(s.question);
  if (prompt.empty()) throw InputError("sample " + s.id + " has an empty question");
  DecodeResult r = model.generate(tok, s.question, inference_options(tok, max_new_tokens, true));
  TokenIds seq = prompt;
  AttentionDump dump;
  for (TokenId t : r.tokens) {
    seq.push_back(t);
    if (t == tok.markers().answer_begin) {
      dump.found_answer_marker = true;
      break;
    }
  }
  const long k = model.adaptive() ? model.perception->prefix_tokens() : 0;
  if (static_cast<long>(seq.size()) + k > model.slm.config().max_seq_len) {
    throw InputError("sample " + s.id + " exceeds the maximum sequence length");
  }
  AttentionCapture<T> cap;
  model.logits(tok, s.question, seq, &cap);
  const std::size_t row = static_cast<std::size_t>(k) + seq.size() - 1;
  dump.query_position = row;
  for (long i = 0; i < k; ++i) dump.labels.push_back("<p" + std::to_string(i) + ">");
  for (TokenId t : seq) dump.labels.push_back(tok.label(t));
  const auto heads = static_cast<Eigen::Index>(cap.final_layer.size());
  dump.weights = Mat<double>::Zero(heads, static_cast<Eigen::Index>(dump.labels.size()));
  for (Eigen::Index h = 0; h < heads; ++h) {
    for (Eigen::Index c = 0; c < dump.weights.cols(); ++c) {
      const double w = static_cast<double>(cap.final_layer[static_cast<std::size_t>(h)](static_cast<Eigen::Index>(row), c));
      dump.weights(h, c) = w < threshold ? 0.0 : w;
    }
  }
  return dump;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_attention_csv(std::ostream& out, const AttentionDump& d) {
  out << "head";
  for (const std::string& l : d.labels) out << ',' << csv_escape(l);
  out << '\n';
  for (Eigen::Index h = 0; h < d.weights.rows(); ++h) {
    out << h;
    for (Eigen::Index c = 0; c < d.weights.cols(); ++c) out << ',' << d.weights(h, c);
    out << '\n';
  }
}

}  // namespace atm
