#pragma once

// End-to-end training: tokenizer, optional mode assignment, training, and
// per-epoch loss-gap tracking.

#include <atm/config.hpp>
#include <atm/evaluator.hpp>
#include <atm/labeling.hpp>
#include <atm/sample.hpp>
#include <atm/tokenizer.hpp>
#include <atm/trainer.hpp>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace atm {

inline Tokenizer build_tokenizer(const Dataset& samples, int min_count) {
  std::vector<std::string> corpus;
  for (const Sample& s : samples) {
    corpus.push_back(s.question);
    corpus.push_back(s.answer);
    if (s.rationale) corpus.push_back(*s.rationale);
  }
  return Tokenizer::build(corpus, min_count);
}

struct TrainOptions {
  std::function<void(const std::string&)> log;
  const Dataset* eval = nullptr;  // loss-gap tracking set
  std::function<void(const Trainer&, int epoch)> on_epoch;
};

struct TrainOutcome {
  std::unique_ptr<Trainer> trainer;
  std::optional<LabelingResult> labeling;
  std::vector<LossGapPoint> loss_gap;
};

inline bool has_mode_labels(const Dataset& d) {
  return std::all_of(d.begin(), d.end(), [](const Sample& s) { return s.mode.has_value(); });
}

inline TrainOutcome train(const ExperimentConfig& cfg, const Dataset& dataset, const TrainOptions& options = {},
                          std::optional<Tokenizer> tokenizer = std::nullopt) {
  cfg.validate();
  const Tokenizer tok = tokenizer ? *tokenizer : build_tokenizer(dataset, cfg.vocab_min_count);
  TrainOutcome out;
  Dataset train = dataset;
  if (cfg.objective == Objective::atm && !has_mode_labels(train)) {
    if (options.log) options.log("no thinking-mode labels present; assigning modes by cross-validation");
    out.labeling = assign_modes(train, cfg, tok, options.log);
    train = apply_records(train, out.labeling->records);
  }
  out.trainer = std::make_unique<Trainer>(cfg, tok, train);
  Trainer& t = *out.trainer;
  t.run([&](int epoch) {
    if (options.log) {
      const EpochRecord& r = t.epoch_log().back();
      std::string line = "epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                         " mean loss " + std::to_string(r.mean_loss);
      if (r.mean_loss_pre) line += " (pre " + std::to_string(*r.mean_loss_pre) + ")";
      if (r.mean_loss_post) line += " (post " + std::to_string(*r.mean_loss_post) + ")";
      options.log(line);
    }
    if (options.eval && !options.eval->empty()) {
      out.loss_gap.push_back(loss_gap_point(t.student(), tok, *options.eval, cfg.objective, cfg.max_rationale_tokens,
                                            cfg.max_new_tokens, epoch));
    }
    if (options.on_epoch) options.on_epoch(t, epoch);
  });
  return out;
}

}  // namespace atm
