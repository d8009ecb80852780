#pragma once

// Single-objective (standard / pre / post) and adaptive-thinking training.
//
// One optimizer step per batch; the batch loss is the mean next-token loss
// over all scored tokens of the batch. Batch order is a pure function of
// (seed, epoch), so a run resumed from a checkpoint replays exactly.

#include <atm/config.hpp>
#include <atm/error.hpp>
#include <atm/losses.hpp>
#include <atm/optim.hpp>
#include <atm/sample.hpp>
#include <atm/sequences.hpp>
#include <atm/student.hpp>
#include <atm/tokenizer.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace atm {

enum class Subset { all, pre, post };

inline const char* to_string(Subset s) {
  switch (s) {
    case Subset::all: return "all";
    case Subset::pre: return "pre";
    case Subset::post: return "post";
  }
  return "all";
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  Subset subset = Subset::all;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> mean_loss_pre;
  std::optional<double> mean_loss_post;
};

inline Student<float> make_student(const ExperimentConfig& cfg, const Tokenizer& tok) {
  Student<float> s;
  s.slm = TinyTransformer<float>(cfg.model_config(tok.vocab_size()), cfg.seed);
  s.features = cfg.features;
  if (cfg.objective == Objective::atm && cfg.prefix_tokens > 0) {
    s.perception.emplace(cfg.prefix_tokens, cfg.hidden, cfg.heads, cfg.scaled_attention, cfg.seed + 1, cfg.init_std);
  }
  return s;
}

inline ThinkingMode target_mode(Objective o, const Sample& s) {
  switch (o) {
    case Objective::standard: return ThinkingMode::standard;
    case Objective::pre: return ThinkingMode::pre;
    case Objective::post: return ThinkingMode::post;
    case Objective::atm:
      if (!s.mode) throw InputError("sample " + s.id + " has no thinking-mode label; run assign first");
      return *s.mode == 1 ? ThinkingMode::pre : ThinkingMode::post;
  }
  return ThinkingMode::standard;
}

class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, const Tokenizer& tok, const Dataset& train,
          std::optional<Student<float>> init = std::nullopt)
      : cfg_(cfg), tok_(tok),
        student_(init ? std::move(*init) : make_student(cfg, tok)),
        optimizer_(AdamConfig{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}) {
    cfg_.validate();
    if (train.empty()) throw InputError("training set is empty");
    const long k = student_.adaptive() ? student_.perception->prefix_tokens() : 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const Sample& s = train[i];
      const ThinkingMode mode = target_mode(cfg_.objective, s);
      TargetSequence seq = build_target(mode, s, tok_, cfg_.max_rationale_tokens);
      if (static_cast<long>(seq.ids.size()) - 1 + k > cfg_.max_seq_len) {
        throw ConfigError("sample " + s.id + " needs " + std::to_string(seq.ids.size() - 1 + k) +
                          " positions but max_seq_len is " + std::to_string(cfg_.max_seq_len));
      }
      Prepared p;
      p.example = shift(seq);
      p.subset = cfg_.objective == Objective::atm ? (mode == ThinkingMode::pre ? Subset::pre : Subset::post)
                                                  : Subset::all;
      if (student_.adaptive()) p.perception_ids = student_.perception_input(tok_, s.question);
      p.id = s.id;
      p.question = s.question;
      examples_.push_back(std::move(p));
    }
    if (cfg_.objective == Objective::atm) {
      const auto pre = std::count_if(examples_.begin(), examples_.end(), [](const Prepared& p) {
        return p.subset == Subset::pre;
      });
      if (pre == 0 || pre == static_cast<long>(examples_.size())) {
        std::cerr << "warning: " << (pre == 0 ? "S_pre" : "S_post")
                  << " is empty; adaptive training degenerates to single-mode training\n";
      }
    }
    steps_per_epoch_ = static_cast<long>(epoch_plan(0).size());
    schedule_.peak = cfg_.learning_rate;
    schedule_.warmup_steps = cfg_.warmup_steps;
    schedule_.cycle_steps = std::max(1L, std::lround(cfg_.lr_cycle_epochs * static_cast<double>(steps_per_epoch_)));
    schedule_.cycle_mult = cfg_.lr_cycle_mult;
    schedule_.total_steps = steps_per_epoch_ * cfg_.epochs;
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return tok_; }
  Student<float>& student() { return student_; }
  const Student<float>& student() const { return student_; }
  AdamW<float>& optimizer() { return optimizer_; }
  const AdamW<float>& optimizer() const { return optimizer_; }
  const LrSchedule& schedule() const { return schedule_; }
  long steps_per_epoch() const { return steps_per_epoch_; }
  long total_steps() const { return steps_per_epoch_ * cfg_.epochs; }
  long step() const { return step_; }
  int epochs_completed() const { return static_cast<int>(step_ / steps_per_epoch_); }
  bool done() const { return step_ >= total_steps(); }
  const std::vector<StepRecord>& step_log() const { return step_log_; }
  const std::vector<EpochRecord>& epoch_log() const { return epoch_log_; }

  // Continue from a saved step (parameters and optimizer state restored by the caller).
  void resume_at(long step) {
    if (step < 0 || step > total_steps()) throw InputError("resume step out of range");
    step_ = step;
    plan_epoch_ = -1;
  }

  // Runs the next optimizer step; returns the batch loss.
  double train_step() {
    if (done()) throw InputError("training already finished");
    const int epoch = static_cast<int>(step_ / steps_per_epoch_);
    if (plan_epoch_ != epoch) {
      plan_ = epoch_plan(epoch);
      plan_epoch_ = epoch;
    }
    const std::vector<std::size_t>& batch = plan_[static_cast<std::size_t>(step_ % steps_per_epoch_)];

    std::size_t scored = 0;
    for (std::size_t i : batch) scored += examples_[i].example.scored();
    const float weight = 1.0f / static_cast<float>(scored);

    auto params = student_.parameters();
    for (Parameter<float>* p : params) p->zero_grad();
    double loss = 0.0;
    const bool dynamic_features = student_.adaptive() && std::find(student_.features.begin(), student_.features.end(),
                                                                   Feature::readability) != student_.features.end();
    for (std::size_t i : batch) {
      Prepared& ex = examples_[i];
      // Perplexity moves with the backbone, so it is re-rendered every use.
      if (dynamic_features) ex.perception_ids = student_.perception_input(tok_, ex.question);
      Tape<float> tape;
      Var l = student_.loss(tape, ex.example, ex.perception_ids, weight);
      loss += static_cast<double>(tape.value(l)(0, 0));
      tape.backward(l);
    }
    if (!std::isfinite(loss)) {
      std::string ids;
      for (std::size_t i : batch) ids += " " + examples_[i].id;
      throw NumericError("non-finite loss at step " + std::to_string(step_) + " (epoch " + std::to_string(epoch) +
                         "), batch:" + ids);
    }
    clip_grad_norm<float>(params, cfg_.grad_clip);
    const double lr = lr_at(step_, schedule_);
    optimizer_.step(params, lr);

    step_log_.push_back({step_, epoch, lr, loss, examples_[batch.front()].subset});
    ++step_;
    if (step_ % steps_per_epoch_ == 0) close_epoch(epoch);
    return loss;
  }

  // Trains to the configured epoch count; on_epoch_end(epoch) after each.
  void run(const std::function<void(int)>& on_epoch_end = {}) {
    while (!done()) {
      train_step();
      if (step_ % steps_per_epoch_ == 0 && on_epoch_end) on_epoch_end(static_cast<int>(step_ / steps_per_epoch_) - 1);
    }
  }

 private:
  struct Prepared {
    ShiftedExample example;
    TokenIds perception_ids;
    Subset subset = Subset::all;
    std::string id;
    std::string question;
  };

  std::vector<std::size_t> shuffled(Subset subset, int epoch) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (subset == Subset::all || examples_[i].subset == subset) idx.push_back(i);
    }
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(subset)};
    Rng rng(seq);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  }

  std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& idx) const {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < idx.size(); i += static_cast<std::size_t>(cfg_.batch_size)) {
      const auto end = std::min(idx.size(), i + static_cast<std::size_t>(cfg_.batch_size));
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i), idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
  }

  // Adaptive runs keep each batch within one subset and interleave the two
  // subsets' batches in proportion to their counts.
  std::vector<std::vector<std::size_t>> epoch_plan(int epoch) const {
    if (cfg_.objective != Objective::atm) return batches_of(shuffled(Subset::all, epoch));
    auto pre = batches_of(shuffled(Subset::pre, epoch));
    auto post = batches_of(shuffled(Subset::post, epoch));
    std::vector<std::vector<std::size_t>> out;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < pre.size() || j < post.size()) {
      const bool take_pre =
          j == post.size() ||
          (i < pre.size() && (static_cast<double>(i) + 0.5) / static_cast<double>(pre.size()) <=
                                 (static_cast<double>(j) + 0.5) / static_cast<double>(post.size()));
      out.push_back(take_pre ? std::move(pre[i++]) : std::move(post[j++]));
    }
    return out;
  }

  void close_epoch(int epoch) {
    EpochRecord r;
    r.epoch = epoch;
    double all = 0, pre = 0, post = 0;
    long n = 0, npre = 0, npost = 0;
    for (auto it = step_log_.rbegin(); it != step_log_.rend() && it->epoch == epoch; ++it) {
      all += it->loss;
      ++n;
      if (it->subset == Subset::pre) {
        pre += it->loss;
        ++npre;
      } else if (it->subset == Subset::post) {
        post += it->loss;
        ++npost;
      }
    }
    r.mean_loss = n > 0 ? all / static_cast<double>(n) : 0.0;
    if (npre > 0) r.mean_loss_pre = pre / static_cast<double>(npre);
    if (npost > 0) r.mean_loss_post = post / static_cast<double>(npost);
    epoch_log_.push_back(r);
  }

  ExperimentConfig cfg_;
  Tokenizer tok_;
  Student<float> student_;
  AdamW<float> optimizer_;
  LrSchedule schedule_;
  std::vector<Prepared> examples_;
  long steps_per_epoch_ = 0;
  long step_ = 0;
  int plan_epoch_ = -1;
  std::vector<std::vector<std::size_t>> plan_;
  std::vector<StepRecord> step_log_;
  std::vector<EpochRecord> epoch_log_;
};

}  // namespace atm
