// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Plot data and records go to the directory given as the first argument.

#include <atm/evaluator.hpp>
#include <atm/labeling.hpp>
#include <atm/pipeline.hpp>
#include <atm/tasks.hpp>
#include <atm/teacher.hpp>
#include <atm/verification.hpp>

#include "mock_teacher.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace {

using namespace atm;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& line) { std::cerr << "  " << line << "\n"; }

// Shared desk setup: 4 layers, H=64, 4 heads on coin-flip with 1-3 flips.
ExperimentConfig desk_config(Objective o) {
  ExperimentConfig c;
  c.objective = o;
  c.layers = 4;
  c.hidden = 64;
  c.heads = 4;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.warmup_steps = 100;
  c.epochs = 5;
  c.prefix_tokens = 4;
  c.labeling_epochs = 2;
  c.max_new_tokens = 160;
  return c;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const OracleRow p = perception_oracle(101, 100);
  const OracleRow d = discrepancy_oracle(102, 100);
  const double secs = seconds_since(t0);
  const bool ok = p.passed && d.passed && p.max_deviation < 1e-9 && d.max_deviation < 1e-9 && secs < 60.0;
  return {ok, "perception max dev " + fmt(p.max_deviation) + " over " + std::to_string(p.instances) +
                  ", discrepancy max dev " + fmt(d.max_deviation) + " over " + std::to_string(d.instances) + ", " +
                  fmt(secs, 3) + " s"};
}

Outcome gradient_correctness() {
  const OracleRow g = gradient_oracle(103);
  return {g.passed && g.max_deviation < 1e-4,
          "max relative error " + fmt(g.max_deviation) + " over " + std::to_string(g.instances) + " entries"};
}

Outcome loss_mask_exactness() {
  Dataset samples = gen_coin_flip(500, 1, 8, 104);
  const Dataset letters = gen_last_letter(500, 1, 6, 105);
  samples.insert(samples.end(), letters.begin(), letters.end());
  const Tokenizer tok = build_tokenizer(samples, 1);
  ModelConfig mc;
  mc.layers = 1;
  mc.hidden = 8;
  mc.heads = 2;
  mc.vocab = tok.vocab_size();
  mc.max_seq_len = 512;
  mc.init_std = 0.5;
  const TinyTransformer<double> model(mc, 106);
  long multiset_failures = 0;
  long perturb_failures = 0;
  long perturbed_positions = 0;
  for (const Sample& s : samples) {
    const TargetSequence pre = build_pre(s, tok);
    const TargetSequence post = build_post(s, tok);
    auto scored = [](const TargetSequence& t) {
      std::multiset<TokenId> m;
      for (std::size_t i = 0; i < t.ids.size(); ++i) {
        if (t.mask[i]) m.insert(t.ids[i]);
      }
      return m;
    };
    if (scored(pre) != scored(post) || scored(pre).empty()) ++multiset_failures;
    for (const TargetSequence* t : {&pre, &post}) {
      const ShiftedExample ex = shift(*t);
      const Mat<double> logits = model.logits(ex.inputs);
      TokenIds changed = ex.targets;
      for (std::size_t i = 0; i < changed.size(); ++i) {
        if (!ex.mask[i]) {
          changed[i] = (changed[i] + 1 + static_cast<TokenId>(i)) % mc.vocab;
          ++perturbed_positions;
        }
      }
      if (nll_loss(logits, changed, ex.mask) - nll_loss(logits, ex.targets, ex.mask) != 0.0) ++perturb_failures;
    }
  }
  return {multiset_failures == 0 && perturb_failures == 0,
          std::to_string(samples.size()) + " samples, " + std::to_string(multiset_failures) +
              " multiset mismatches, " + std::to_string(perturb_failures) + " nonzero loss changes over " +
              std::to_string(perturbed_positions) + " perturbed positions"};
}

Outcome label_assignment(const fs::path& out_dir) {
  Dataset mixed = gen_coin_flip(500, 1, 1, 107);
  const Dataset hard = gen_coin_flip(500, 4, 4, 108);
  mixed.insert(mixed.end(), hard.begin(), hard.end());
  const ExperimentConfig cfg = desk_config(Objective::atm);
  const Tokenizer tok = build_tokenizer(mixed, 1);

  const auto t0 = std::chrono::steady_clock::now();
  const LabelingResult first = assign_modes(mixed, cfg, tok, log);
  const fs::path a = out_dir / "records_run1.jsonl";
  save_records(a, first.records);
  const LabelingResult second = assign_modes(mixed, cfg, tok);
  const fs::path b = out_dir / "records_run2.jsonl";
  save_records(b, second.records);
  const bool identical = read_file(a) == read_file(b);

  const auto persisted = load_records(a);
  long predicate_violations = 0;
  for (const DiscrepancyRecord& r : persisted) predicate_violations += r.c != assign_rule(r.diff_pre, r.diff_post);

  std::map<std::string, int> scored;
  bool leaked = false;
  for (std::size_t f = 0; f < first.fold_heldout_ids.size(); ++f) {
    const std::set<std::string> train(first.fold_train_ids[f].begin(), first.fold_train_ids[f].end());
    for (const std::string& id : first.fold_heldout_ids[f]) {
      ++scored[id];
      leaked = leaked || train.count(id) > 0;
    }
  }
  bool once = scored.size() == mixed.size() && persisted.size() == mixed.size();
  for (const auto& [id, n] : scored) once = once && n == 1;

  const double pre_share = static_cast<double>(first.pre.size()) / static_cast<double>(mixed.size());
  const bool split_ok = pre_share >= 0.05 && pre_share <= 0.95;
  long pre_easy = 0;
  for (const Sample& s : first.pre) pre_easy += s.extra.at("steps").get<int>() == 1;
  return {identical && predicate_violations == 0 && once && !leaked && split_ok,
          "S_pre " + std::to_string(first.pre.size()) + " (" + std::to_string(pre_easy) + " one-flip), S_post " +
              std::to_string(first.post.size()) + ", predicate violations " + std::to_string(predicate_violations) +
              ", scored once " + (once && !leaked ? "yes" : "no") + ", rerun identical " +
              (identical ? "yes" : "no") + ", " + fmt(seconds_since(t0), 3) + " s for two runs"};
}

struct DeskRun {
  std::unique_ptr<Trainer> trainer;
  std::vector<LossGapPoint> loss_gap;
  double accuracy = 0.0;
  double seconds = 0.0;
};

DeskRun desk_train(Objective o, const Dataset& train, const Dataset& test, const Tokenizer& tok, bool track_gap) {
  const ExperimentConfig cfg = desk_config(o);
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opts;
  opts.log = log;
  if (track_gap) opts.eval = &test;
  TrainOutcome out = atm::train(cfg, train, opts, tok);
  DeskRun r;
  r.loss_gap = std::move(out.loss_gap);
  r.trainer = std::move(out.trainer);
  r.accuracy = accuracy(predict_all(r.trainer->student(), tok, test, inference_options(tok, cfg.max_new_tokens, false)));
  r.seconds = seconds_since(t0);
  log(std::string(to_string(o)) + ": test accuracy " + fmt(r.accuracy) + " after " + fmt(r.seconds, 3) + " s");
  return r;
}

double mean_tokens(const std::vector<Prediction>& preds) {
  double n = 0.0;
  for (const Prediction& p : preds) n += static_cast<double>(p.emitted.size());
  return preds.empty() ? 0.0 : n / static_cast<double>(preds.size());
}

struct DeskResults {
  Outcome training;
  Outcome efficiency;
};

DeskResults desk_experiments(const fs::path& out_dir) {
  const Dataset train = gen_coin_flip(2000, 1, 3, 109);
  const Dataset test = gen_coin_flip(500, 1, 3, 110);
  const Tokenizer tok = build_tokenizer(train, 1);
  DeskResults res;

  const DeskRun standard = desk_train(Objective::standard, train, test, tok, false);
  const DeskRun post = desk_train(Objective::post, train, test, tok, false);
  const DeskRun adaptive = desk_train(Objective::atm, train, test, tok, false);
  const bool ok = standard.accuracy >= 0.95 && post.accuracy >= standard.accuracy - 0.03 &&
                  adaptive.accuracy >= standard.accuracy - 0.03 && standard.seconds < 1800.0;
  res.training = {ok, "standard " + fmt(100 * standard.accuracy) + "% (" + fmt(standard.seconds, 3) + " s), post " +
                          fmt(100 * post.accuracy) + "%, atm " + fmt(100 * adaptive.accuracy) + "% after " +
                          std::to_string(desk_config(Objective::standard).epochs) + " epochs"};

  // Pre-mode full inference against answer-only post-mode inference.
  const DeskRun pre = desk_train(Objective::pre, train, test, tok, false);
  const int max_new = desk_config(Objective::pre).max_new_tokens;
  const auto pre_full = predict_all(pre.trainer->student(), tok, test, inference_options(tok, max_new, false));
  const auto post_fast = predict_all(post.trainer->student(), tok, test, inference_options(tok, max_new, true));
  double rationale_tokens = 0.0;
  for (const Sample& s : test) rationale_tokens += static_cast<double>(tok.encode(*s.rationale).size());
  rationale_tokens /= static_cast<double>(test.size());
  const double full_tokens = mean_tokens(pre_full);
  const double fast_tokens = mean_tokens(post_fast);
  const double ratio = fast_tokens > 0 ? full_tokens / fast_tokens : 0.0;
  {
    std::ofstream csv(out_dir / "efficiency.csv");
    auto rows = summarize_efficiency("full", pre_full);
    auto fast = summarize_efficiency("answer_only", post_fast);
    rows.insert(rows.end(), fast.begin(), fast.end());
    write_efficiency_csv(csv, rows);
  }
  res.efficiency = {rationale_tokens >= 20.0 && fast_tokens < full_tokens && ratio >= 5.0,
                    "pre full " + fmt(full_tokens) + " tokens/sample, post answer-only " + fmt(fast_tokens) +
                        " tokens/sample, ratio " + fmt(ratio, 3) + "x, mean rationale " + fmt(rationale_tokens) +
                        " tokens"};

  return res;
}

// A harder post-thinking run (4-8 flips, 300 samples) so that incorrect
// samples survive to the last epoch. The baseline is the first epoch in which
// both partitions are non-empty.
Outcome loss_gap_trend(const fs::path& out_dir) {
  const Dataset train = gen_coin_flip(300, 4, 8, 115);
  const Dataset eval = gen_coin_flip(300, 4, 8, 116);
  const DeskRun run = desk_train(Objective::post, train, eval, build_tokenizer(train, 1), true);
  {
    std::ofstream csv(out_dir / "loss_gap_post.csv");
    write_loss_gap_csv(csv, run.loss_gap);
  }
  const auto first = std::find_if(run.loss_gap.begin(), run.loss_gap.end(),
                                  [](const LossGapPoint& p) { return p.gap().has_value(); });
  const LossGapPoint& last = run.loss_gap.back();
  auto describe = [](const LossGapPoint& p) {
    return "epoch " + std::to_string(p.epoch + 1) + " gap " + (p.gap() ? fmt(*p.gap()) : std::string("n/a")) + " (" +
           std::to_string(p.incorrect) + " incorrect)";
  };
  if (first == run.loss_gap.end()) {
    return {true, "no epoch had both partitions; warning: gap direction not asserted"};
  }
  const std::string detail = "first " + describe(*first) + ", final " + describe(last);
  if (last.gap() && first->epoch != last.epoch && *last.gap() > *first->gap()) return {true, detail};
  if (last.incorrect < 20) return {true, detail + "; warning: fewer than 20 incorrect samples, not asserted"};
  return {false, detail};
}

Outcome metric_units() {
  const std::vector<std::optional<std::string>> p{"yes", "yes", "no", "no", "yes", "no"};
  const std::vector<std::string> g{"yes", "yes", "no", "no", "no", "yes"};
  const double acc = accuracy(p, g);
  const double bleu = corpus_bleu({"the coin is heads up", "so the answer is yes"},
                                  {"the coin is heads up", "so the answer is yes"});
  const OracleRow adam = adam_oracle(111);
  const bool ok = std::abs(acc - 4.0 / 6.0) <= 1e-12 && std::abs(bleu - 1.0) <= 1e-12 && adam.passed;
  return {ok, "accuracy " + fmt(acc, 6) + ", BLEU identity " + fmt(bleu, 6) + ", Adam max dev " +
                  fmt(adam.max_deviation) + " over " + std::to_string(adam.instances) + " steps"};
}

Outcome teacher_client(const fs::path& out_dir) {
  using atm::testing::MockTeacher;
  MockTeacher mock([](const nlohmann::json& b, httplib::Response& res) {
    atm::testing::reply(res, atm::testing::canned(b));
  });
  TeacherConfig cfg;
  cfg.endpoint = mock.endpoint();
  cfg.cache_dir = out_dir / "teacher-cache";
  fs::remove_all(cfg.cache_dir);
  cfg.parallelism = 2;
  cfg.timeout_s = 5;
  Dataset questions = gen_coin_flip(12, 1, 3, 112);
  for (Sample& s : questions) s.rationale.reset();
  HarvestStats first;
  HarvestStats second;
  const Dataset a = harvest(questions, cfg, &first);
  const Dataset b = harvest(questions, cfg, &second);
  const bool idempotent = a == b && second.requests == 0 && mock.requests() == 12;
  const bool bounded = mock.max_in_flight() <= 2;

  auto make = [](std::string id, std::string answer, std::optional<std::string> r) {
    Sample s;
    s.id = std::move(id);
    s.question = "q?";
    s.answer = std::move(answer);
    s.rationale = std::move(r);
    return s;
  };
  const Dataset fixture{
      make("k1", "yes", "Flipped twice, so yes."),
      make("k2", "no", "One flip means tails, so the answer is no."),
      make("k3", "42", "Six times seven is 42."),
      make("k4", "B", "Thus the answer is (B)."),
      make("k5", "yn", "Concatenating gives yn, so the answer is yn."),
      make("d1", "yes", "So the answer is no."),
      make("d2", "7", "It comes to 8."),
      make("d3", "A", "The answer is (C)."),
      make("d4", "ab", "Hard to say."),
      make("d5", "yes", std::nullopt),
  };
  const FilterResult f = filter_aligned(fixture);
  bool rule = f.retained.size() == 5 && f.dropped.size() == 5;
  for (const Sample& s : f.retained) rule = rule && s.id[0] == 'k';

  const Dataset pool = gen_coin_flip(400, 1, 3, 113);
  bool sizes = true;
  std::string sized;
  for (double pct : {100.0, 75.0, 50.0, 25.0, 12.5}) {
    const auto n = subsample(pool, pct, 114).size();
    sizes = sizes && std::abs(static_cast<double>(n) - 400.0 * pct / 100.0) <= 1.0;
    sized += (sized.empty() ? "" : "/") + std::to_string(n);
  }
  return {idempotent && bounded && rule && sizes,
          "requests " + std::to_string(first.requests) + " then " + std::to_string(second.requests) +
              ", max in flight " + std::to_string(mock.max_in_flight()) + " (limit 2), filter kept " +
              std::to_string(f.retained.size()) + "/10 as expected " + (rule ? "yes" : "no") + ", retention sizes " +
              sized + " of 400"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance-out");
  fs::create_directories(out_dir);

  std::map<int, Outcome> results;
  auto attempt = [&](int id, const std::function<Outcome()>& f) {
    try {
      results[id] = f();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << id << ": " << (results[id].pass ? "PASS" : "FAIL") << "  " << results[id].detail
              << std::endl;
  };

  attempt(1, oracle_equivalence);
  attempt(2, gradient_correctness);
  attempt(3, loss_mask_exactness);
  attempt(4, [&] { return label_assignment(out_dir); });
  std::optional<DeskResults> desk;
  try {
    desk = desk_experiments(out_dir);
  } catch (const std::exception& e) {
    const Outcome failed{false, std::string("exception: ") + e.what()};
    desk = DeskResults{failed, failed};
  }
  attempt(5, [&] { return desk->training; });
  attempt(6, [&] { return desk->efficiency; });
  attempt(7, [&] { return loss_gap_trend(out_dir); });
  attempt(8, metric_units);
  attempt(9, [&] { return teacher_client(out_dir); });

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; });
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
