#pragma once

// Thinking-mode assignment by k-fold cross-validation: for every fold, a
// pre-thinking and a post-thinking student are trained on the other folds
// and score the held-out samples; a sample goes to S_pre when the pre
// student's discrepancy is strictly lower.

#include <atm/config.hpp>
#include <atm/error.hpp>
#include <atm/losses.hpp>
#include <atm/manifest.hpp>
#include <atm/sample.hpp>
#include <atm/sequences.hpp>
#include <atm/trainer.hpp>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace atm {

// Returns k folds of indices into a set of n items; sizes differ by at most 1.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (n < static_cast<std::size_t>(k)) {
    throw InputError("dataset of " + std::to_string(n) + " samples is smaller than " + std::to_string(k) + " folds");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) folds[i % static_cast<std::size_t>(k)].push_back(idx[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// Mean cross-entropy of the model's next-token distributions against the
// golden answer and rationale tokens (markers and question excluded).
template <typename T>
double score_discrepancy(const TinyTransformer<T>& model, const TargetSequence& seq) {
  const ShiftedExample ex = shift(seq.ids, seq.content_mask());
  if (ex.scored() == 0) throw InputError("discrepancy: sequence has no scored tokens");
  return nll_loss(model.logits(ex.inputs), ex.targets, ex.mask);
}

struct DiscrepancyRecord {
  std::string id;
  double diff_pre = 0.0;
  double diff_post = 0.0;
  int c = 0;
  int fold = 0;
  std::optional<bool> post_correct;  // answer_correctness baseline only

  bool operator==(const DiscrepancyRecord&) const = default;
};

// c = 1 (pre) iff diff_pre < diff_post; ties go to post.
inline int assign_rule(double diff_pre, double diff_post) { return diff_pre < diff_post ? 1 : 0; }

struct LabelingResult {
  Dataset pre;
  Dataset post;
  std::vector<DiscrepancyRecord> records;  // in dataset order
  std::vector<std::vector<std::string>> fold_train_ids;
  std::vector<std::vector<std::string>> fold_heldout_ids;
};

using LabelingLog = std::function<void(const std::string&)>;

inline std::uint64_t fold_seed(std::uint64_t seed, int fold, int which) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold), static_cast<std::uint32_t>(which)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Student<float> train_fold_model(const ExperimentConfig& base, Objective objective, int fold,
                                       const Tokenizer& tok, const Dataset& train) {
  ExperimentConfig cfg = base;
  cfg.objective = objective;
  cfg.epochs = base.effective_labeling_epochs();
  cfg.seed = fold_seed(base.seed, fold, objective == Objective::pre ? 0 : 1);
  Trainer t(cfg, tok, train);
  t.run();
  return std::move(t.student());
}

inline bool answers_correctly(const Student<float>& model, const Tokenizer& tok, const Sample& s, int max_new) {
  DecodeOptions o;
  o.max_new_tokens = max_new;
  o.stop_tokens = {tok.markers().answer_end, tok.markers().eos};
  const DecodeResult r = model.generate(tok, s.question, o);
  const auto a = extract_answer(r.tokens, tok);
  return a && *a == normalize_answer(s.answer);
}

inline LabelingResult assign_modes(const Dataset& samples, const ExperimentConfig& cfg, const Tokenizer& tok,
                                   const LabelingLog& log = {}) {
  cfg.validate();
  for (const Sample& s : samples) {
    if (!s.rationale) throw InputError("sample " + s.id + " has no rationale; mode assignment needs rationales");
  }
  const auto folds = kfold_split(samples.size(), cfg.folds, cfg.seed);
  LabelingResult out;
  out.records.resize(samples.size());
  std::vector<bool> scored(samples.size(), false);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const int fold = static_cast<int>(f);
    std::vector<bool> held(samples.size(), false);
    for (std::size_t i : folds[f]) held[i] = true;
    Dataset train;
    std::vector<std::string> train_ids;
    std::vector<std::string> heldout_ids;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (held[i]) {
        heldout_ids.push_back(samples[i].id);
      } else {
        train.push_back(samples[i]);
        train_ids.push_back(samples[i].id);
      }
    }
    if (log) log("fold " + std::to_string(fold) + ": training pre and post students on " + std::to_string(train.size()) +
                 " samples");
    const Student<float> pre = train_fold_model(cfg, Objective::pre, fold, tok, train);
    const Student<float> post = train_fold_model(cfg, Objective::post, fold, tok, train);
    for (std::size_t i : folds[f]) {
      const Sample& s = samples[i];
      DiscrepancyRecord r;
      r.id = s.id;
      r.fold = fold;
      r.diff_pre = score_discrepancy(pre.slm, build_pre(s, tok, cfg.max_rationale_tokens));
      r.diff_post = score_discrepancy(post.slm, build_post(s, tok, cfg.max_rationale_tokens));
      if (cfg.labeling_strategy == LabelingStrategy::discrepancy) {
        r.c = assign_rule(r.diff_pre, r.diff_post);
      } else {
        r.post_correct = answers_correctly(post, tok, s, cfg.max_new_tokens);
        r.c = *r.post_correct ? 0 : 1;
      }
      if (scored[i]) throw InternalError("internal: sample " + s.id + " scored twice");
      scored[i] = true;
      out.records[i] = r;
    }
    out.fold_train_ids.push_back(std::move(train_ids));
    out.fold_heldout_ids.push_back(std::move(heldout_ids));
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample s = samples[i];
    s.mode = out.records[i].c;
    (s.mode == 1 ? out.pre : out.post).push_back(std::move(s));
  }
  if (log) {
    log("assigned " + std::to_string(out.pre.size()) + " samples to pre-thinking and " +
        std::to_string(out.post.size()) + " to post-thinking");
  }
  return out;
}

inline nlohmann::ordered_json to_json(const DiscrepancyRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["diff_pre"] = r.diff_pre;
  j["diff_post"] = r.diff_post;
  j["c"] = r.c;
  j["fold"] = r.fold;
  if (r.post_correct) j["post_correct"] = *r.post_correct;
  return j;
}

inline void save_records(const std::filesystem::path& path, const std::vector<DiscrepancyRecord>& records) {
  std::string text;
  for (const DiscrepancyRecord& r : records) text += to_json(r).dump() + "\n";
  write_file_atomic(path, text);
}

inline std::vector<DiscrepancyRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<DiscrepancyRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::ordered_json::parse(line);
      DiscrepancyRecord r;
      r.id = j.at("id").get<std::string>();
      r.diff_pre = j.at("diff_pre").get<double>();
      r.diff_post = j.at("diff_post").get<double>();
      r.c = j.at("c").get<int>();
      r.fold = j.at("fold").get<int>();
      if (j.contains("post_correct")) r.post_correct = j.at("post_correct").get<bool>();
      if (r.c != 0 && r.c != 1) throw InputError("c must be 0 or 1");
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// Copies the mode labels of records onto samples (matched by id).
inline Dataset apply_records(const Dataset& samples, const std::vector<DiscrepancyRecord>& records) {
  std::unordered_map<std::string, int> by_id;
  for (const DiscrepancyRecord& r : records) by_id[r.id] = r.c;
  Dataset out = samples;
  for (Sample& s : out) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) throw InputError("no mode record for sample " + s.id);
    s.mode = it->second;
  }
  return out;
}

}  // namespace atm
