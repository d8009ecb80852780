// atm: command-line driver for data generation, rationale harvesting, mode
// assignment, training, evaluation and analysis.

#include <atm/checkpoint.hpp>
#include <atm/config.hpp>
#include <atm/evaluator.hpp>
#include <atm/labeling.hpp>
#include <atm/manifest.hpp>
#include <atm/pipeline.hpp>
#include <atm/tasks.hpp>
#include <atm/teacher.hpp>
#include <atm/verification.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace atm;

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::pair<int, int> parse_range(const std::string& text, const char* what) {
  static const std::regex re(R"(^\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw UsageError(std::string(what) + " must look like 3 or 1..4, got " + text);
  const int lo = std::stoi(m[1].str());
  const int hi = m[2].matched ? std::stoi(m[2].str()) : lo;
  return {lo, hi};
}

std::string joined_command(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) {
    if (i > 1) s += ' ';
    s += argv[i];
  }
  return s;
}

// Experiment settings: a config file plus any flag that was given.
struct ConfigFlags {
  std::string path;
  std::optional<int> layers, hidden, heads, max_seq_len, batch_size, epochs, prefix_tokens, folds, labeling_epochs,
      max_rationale_tokens, max_new_tokens, vocab_min_count;
  std::optional<double> learning_rate, weight_decay, grad_clip, lr_cycle_epochs, lr_cycle_mult, init_std;
  std::optional<long> warmup_steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> objective, labeling_strategy;
  std::vector<std::string> features;
  bool scaled_attention = false;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "JSON config file (flags override its keys)");
    app->add_option("--layers", layers);
    app->add_option("--hidden", hidden);
    app->add_option("--heads", heads);
    app->add_option("--max-seq-len", max_seq_len);
    app->add_option("--batch-size", batch_size);
    app->add_option("--epochs", epochs);
    app->add_option("--lr", learning_rate, "peak learning rate");
    app->add_option("--warmup", warmup_steps, "warm-up steps");
    app->add_option("--lr-cycle-epochs", lr_cycle_epochs);
    app->add_option("--lr-cycle-mult", lr_cycle_mult);
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--grad-clip", grad_clip);
    app->add_option("--init-std", init_std);
    app->add_option("--prefix-tokens", prefix_tokens, "soft prompt length K");
    app->add_option("--features", features, "perception features: word_count, readability");
    app->add_flag("--scaled-attention", scaled_attention, "scale perception attention by 1/sqrt(head dim)");
    app->add_option("--folds", folds);
    app->add_option("--labeling-epochs", labeling_epochs);
    app->add_option("--labeling-strategy", labeling_strategy);
    app->add_option("--max-rationale-tokens", max_rationale_tokens);
    app->add_option("--max-new-tokens", max_new_tokens);
    app->add_option("--vocab-min-count", vocab_min_count);
    app->add_option("--seed", seed);
    app->add_option("--objective", objective, "standard, pre, post or atm");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = path.empty() ? ExperimentConfig{} : load_config(path);
    nlohmann::ordered_json o = nlohmann::ordered_json::object();
    auto set = [&](const char* key, const auto& v) {
      if (v) o[key] = *v;
    };
    set("layers", layers);
    set("hidden", hidden);
    set("heads", heads);
    set("max_seq_len", max_seq_len);
    set("batch_size", batch_size);
    set("epochs", epochs);
    set("learning_rate", learning_rate);
    set("warmup_steps", warmup_steps);
    set("lr_cycle_epochs", lr_cycle_epochs);
    set("lr_cycle_mult", lr_cycle_mult);
    set("weight_decay", weight_decay);
    set("grad_clip", grad_clip);
    set("init_std", init_std);
    set("prefix_tokens", prefix_tokens);
    set("folds", folds);
    set("labeling_epochs", labeling_epochs);
    set("labeling_strategy", labeling_strategy);
    set("max_rationale_tokens", max_rationale_tokens);
    set("max_new_tokens", max_new_tokens);
    set("vocab_min_count", vocab_min_count);
    set("seed", seed);
    set("objective", objective);
    if (!features.empty()) o["features"] = features;
    if (scaled_attention) o["scaled_attention"] = true;
    apply_json(c, o);
    c.validate();
    return c;
  }
};

Manifest make_manifest(const std::string& command, const ExperimentConfig* cfg, std::uint64_t seed,
                       const std::vector<fs::path>& inputs) {
  Manifest m;
  m.command = command;
  if (cfg) m.config = to_json(*cfg);
  m.seed = seed;
  for (const fs::path& p : inputs) m.add_input(p);
  return m;
}

void save_dataset(const fs::path& out, const Dataset& d, const Manifest& m) {
  save_jsonl(out, d);
  write_manifest(out, m);
}

// CSV with the producing manifest id as a leading comment.
void save_csv(const fs::path& out, const std::string& body, const Manifest& m) {
  write_file_atomic(out, "# manifest " + m.id() + "\n" + body);
  write_manifest(out, m);
}

DecodeOptions decode_options(const Checkpoint& c, bool answer_only) {
  return inference_options(c.tokenizer, c.config.max_new_tokens, answer_only);
}

nlohmann::ordered_json prediction_json(const Prediction& p, const Tokenizer& tok) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["gold"] = p.gold;
  j["answer"] = p.answer ? nlohmann::ordered_json(*p.answer) : nlohmann::ordered_json(nullptr);
  j["correct"] = p.correct;
  j["mode"] = to_string(p.mode);
  j["tokens"] = p.emitted.size();
  j["truncated"] = p.truncated;
  std::string text;
  for (TokenId t : p.emitted) text += tok.label(t);
  j["output"] = text;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive-thinking chain-of-thought distillation toolkit"};
  app.require_subcommand(1);
  const std::string command = joined_command(argc, argv);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic task corpus");
  std::string gen_task;
  std::size_t gen_n = 1000;
  std::string gen_range = "1..4";
  std::uint64_t gen_seed = 0;
  fs::path gen_out;
  gen->add_option("task", gen_task, "coin-flip or last-letter")->required()->check(CLI::IsMember({"coin-flip", "last-letter"}));
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--flips,--words", gen_range, "difficulty range, e.g. 1..4");
  gen->add_option("--seed", gen_seed);
  gen->add_option("-o,--output", gen_out)->required();

  // harvest
  auto* harv = app.add_subcommand("harvest", "fill rationales from a chat-completion teacher");
  TeacherConfig tcfg;
  fs::path harv_in, harv_out;
  harv->add_option("-i,--input", harv_in)->required();
  harv->add_option("-o,--output", harv_out)->required();
  harv->add_option("--endpoint", tcfg.endpoint);
  harv->add_option("--model", tcfg.model);
  harv->add_option("--api-key-env", tcfg.api_key_env, "environment variable holding the API key");
  harv->add_option("--temperature", tcfg.temperature);
  harv->add_option("--max-tokens", tcfg.max_tokens);
  harv->add_option("--cache-dir", tcfg.cache_dir);
  harv->add_flag("--cache-only", tcfg.cache_only, "fail instead of calling the teacher on a cache miss");
  harv->add_option("--retries", tcfg.max_retries);
  harv->add_option("--backoff-ms", tcfg.backoff_ms);
  harv->add_option("--parallelism", tcfg.parallelism);
  harv->add_option("--timeout", tcfg.timeout_s, "seconds");

  // filter
  auto* filt = app.add_subcommand("filter", "keep samples whose rationale concludes with the gold answer");
  fs::path filt_in, filt_out;
  double filt_retention = 100.0;
  std::uint64_t filt_seed = 0;
  filt->add_option("-i,--input", filt_in)->required();
  filt->add_option("-o,--output", filt_out)->required();
  filt->add_option("--retention", filt_retention, "percent of aligned samples to keep (100, 75, 50, 25, 12.5)");
  filt->add_option("--seed", filt_seed);

  // assign
  auto* asg = app.add_subcommand("assign", "assign thinking modes by k-fold discrepancy");
  ConfigFlags asg_cfg;
  fs::path asg_in, asg_records, asg_labeled;
  asg_cfg.attach(asg);
  asg->add_option("-i,--input", asg_in)->required();
  asg->add_option("-o,--records", asg_records, "discrepancy records (JSONL)")->required();
  asg->add_option("--labeled", asg_labeled, "also write the samples with their mode labels");

  // train
  auto* trn = app.add_subcommand("train", "train a student");
  ConfigFlags trn_cfg;
  fs::path trn_in, trn_out, trn_records, trn_eval, trn_metrics, trn_loss_gap, trn_resume, trn_epoch_dir;
  trn_cfg.attach(trn);
  trn->add_option("-i,--input", trn_in, "training samples (JSONL)")->required();
  trn->add_option("-o,--output", trn_out, "checkpoint path")->required();
  trn->add_option("--records", trn_records, "mode records from assign (atm objective)");
  trn->add_option("--eval", trn_eval, "held-out samples for loss-gap tracking");
  trn->add_option("--metrics", trn_metrics, "per-step metrics CSV");
  trn->add_option("--loss-gap", trn_loss_gap, "per-epoch loss-gap CSV (needs --eval)");
  trn->add_option("--resume", trn_resume, "continue from a checkpoint");
  trn->add_option("--epoch-checkpoints", trn_epoch_dir, "directory for one checkpoint per epoch");

  // eval
  auto* evl = app.add_subcommand("eval", "accuracy of a checkpoint on a test set");
  fs::path evl_model, evl_in, evl_out;
  bool evl_answer_only = false;
  evl->add_option("-m,--model", evl_model)->required();
  evl->add_option("-i,--input", evl_in)->required();
  evl->add_option("-o,--predictions", evl_out, "per-sample predictions (JSONL)");
  evl->add_flag("--answer-only", evl_answer_only, "stop each generation at the closing answer marker");

  // infer
  auto* inf = app.add_subcommand("infer", "generate for questions");
  fs::path inf_model, inf_in;
  std::vector<std::string> inf_questions;
  bool inf_answer_only = false;
  inf->add_option("-m,--model", inf_model)->required();
  inf->add_option("-q,--question", inf_questions);
  inf->add_option("-i,--input", inf_in, "JSONL with a question field");
  inf->add_flag("--answer-only", inf_answer_only, "stop each generation at the closing answer marker");

  // analyze
  auto* ana = app.add_subcommand("analyze", "BLEU, efficiency, attention maps, loss gap");
  ana->require_subcommand(1);
  auto* bleu = ana->add_subcommand("bleu", "corpus BLEU-4 of candidate vs reference rationales");
  fs::path bleu_cand, bleu_ref;
  bleu->add_option("--candidates", bleu_cand, "JSONL with rationales")->required();
  bleu->add_option("--references", bleu_ref, "JSONL with rationales, matched by id")->required();
  auto* eff = ana->add_subcommand("efficiency", "answer-only vs full inference cost");
  fs::path eff_model, eff_in, eff_out;
  eff->add_option("-m,--model", eff_model)->required();
  eff->add_option("-i,--input", eff_in)->required();
  eff->add_option("-o,--output", eff_out, "CSV");
  auto* att = ana->add_subcommand("attention", "final-layer attention at the answer position");
  fs::path att_model, att_in, att_out;
  std::size_t att_index = 0;
  double att_threshold = 0.1;
  att->add_option("-m,--model", att_model)->required();
  att->add_option("-i,--input", att_in)->required();
  att->add_option("--index", att_index, "sample index in the input file");
  att->add_option("--threshold", att_threshold);
  att->add_option("-o,--output", att_out, "CSV")->required();
  auto* gap = ana->add_subcommand("loss-gap", "loss of correct vs incorrect samples over a checkpoint series");
  std::vector<fs::path> gap_models;
  fs::path gap_in, gap_out;
  gap->add_option("-m,--models", gap_models, "checkpoints in training order")->required();
  gap->add_option("-i,--input", gap_in)->required();
  gap->add_option("-o,--output", gap_out, "CSV")->required();

  // verify
  auto* ver = app.add_subcommand("verify", "run the numerical oracle suite");
  std::uint64_t ver_seed = 1;
  fs::path ver_csv;
  ver->add_option("--seed", ver_seed);
  ver->add_option("--csv", ver_csv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCategory::usage);
  }

  try {
    if (*gen) {
      const auto [lo, hi] = parse_range(gen_range, "difficulty range");
      Dataset d = gen_task == "coin-flip" ? gen_coin_flip(gen_n, lo, hi, gen_seed) : gen_last_letter(gen_n, lo, hi, gen_seed);
      save_dataset(gen_out, d, make_manifest(command, nullptr, gen_seed, {}));
      log_line("wrote " + std::to_string(d.size()) + " samples to " + gen_out.string());
    } else if (*harv) {
      HarvestStats stats;
      Dataset d = harvest(load_jsonl(harv_in), tcfg, &stats);
      save_dataset(harv_out, d, make_manifest(command, nullptr, 0, {harv_in}));
      log_line("harvested " + std::to_string(d.size()) + " rationales (" + std::to_string(stats.cache_hits) +
               " cached, " + std::to_string(stats.requests) + " requests)");
    } else if (*filt) {
      const Dataset in = load_jsonl(filt_in);
      FilterResult r = filter_aligned(in);
      for (const auto& [id, why] : r.dropped) log_line("dropped " + id + ": " + why);
      Dataset kept = subsample(r.retained, filt_retention, filt_seed);
      save_dataset(filt_out, kept, make_manifest(command, nullptr, filt_seed, {filt_in}));
      std::ostringstream msg;
      msg << "aligned " << r.retained.size() << "/" << in.size() << " (retention rate " << r.retention_rate
          << "); kept " << kept.size() << " at " << filt_retention << "%";
      log_line(msg.str());
    } else if (*asg) {
      const ExperimentConfig cfg = asg_cfg.resolve();
      const Dataset d = load_jsonl(asg_in);
      const Tokenizer tok = build_tokenizer(d, cfg.vocab_min_count);
      LabelingResult r = assign_modes(d, cfg, tok, log_line);
      const Manifest m = make_manifest(command, &cfg, cfg.seed, {asg_in});
      save_records(asg_records, r.records);
      write_manifest(asg_records, m);
      if (!asg_labeled.empty()) save_dataset(asg_labeled, apply_records(d, r.records), m);
    } else if (*trn) {
      ExperimentConfig cfg = trn_cfg.resolve();
      Dataset d = load_jsonl(trn_in);
      std::vector<fs::path> inputs{trn_in};
      if (!trn_records.empty()) {
        d = apply_records(d, load_records(trn_records));
        inputs.push_back(trn_records);
      }
      Dataset eval;
      if (!trn_eval.empty()) {
        eval = load_jsonl(trn_eval);
        inputs.push_back(trn_eval);
      }
      if (!trn_loss_gap.empty() && trn_eval.empty()) throw UsageError("--loss-gap needs --eval");
      std::optional<Checkpoint> resume;
      if (!trn_resume.empty()) {
        resume = load_checkpoint(trn_resume);
        cfg = resume->config;  // a resumed run keeps the settings it started with
        inputs.push_back(trn_resume);
      }
      const Manifest m = make_manifest(command, &cfg, cfg.seed, inputs);
      const std::string mid = m.id();

      std::unique_ptr<Trainer> trainer;
      std::vector<LossGapPoint> gaps;
      if (resume) {
        if (cfg.objective == Objective::atm && !has_mode_labels(d)) {
          throw InputError("resuming an adaptive run needs --records or labelled samples");
        }
        trainer = std::make_unique<Trainer>(resume_trainer(*resume, d));
        log_line("resuming at step " + std::to_string(resume->step));
        trainer->run([&](int epoch) {
          if (!eval.empty()) {
            gaps.push_back(loss_gap_point(trainer->student(), trainer->tokenizer(), eval, cfg.objective,
                                          cfg.max_rationale_tokens, cfg.max_new_tokens, epoch));
          }
          log_line("epoch " + std::to_string(epoch + 1) + " mean loss " +
                   std::to_string(trainer->epoch_log().back().mean_loss));
        });
      } else {
        TrainOptions opt;
        opt.log = log_line;
        opt.eval = eval.empty() ? nullptr : &eval;
        if (!trn_epoch_dir.empty()) {
          opt.on_epoch = [&](const Trainer& t, int epoch) {
            const fs::path p = trn_epoch_dir / ("epoch-" + std::to_string(epoch + 1) + ".ckpt");
            save_checkpoint(p, snapshot(t, mid));
            write_manifest(p, m);
          };
        }
        TrainOutcome out = train(cfg, d, opt);
        if (out.labeling) {
          fs::path rec = trn_out;
          rec += ".records.jsonl";
          save_records(rec, out.labeling->records);
          write_manifest(rec, m);
        }
        trainer = std::move(out.trainer);
        gaps = std::move(out.loss_gap);
      }
      save_checkpoint(trn_out, snapshot(*trainer, mid));
      write_manifest(trn_out, m);
      log_line("checkpoint " + trn_out.string() + " sha256 " + sha256_file(trn_out));
      if (!trn_metrics.empty()) {
        std::ostringstream csv;
        csv.precision(10);
        csv << "step,epoch,lr,loss,subset\n";
        for (const StepRecord& r : trainer->step_log()) {
          csv << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << ',' << to_string(r.subset) << '\n';
        }
        save_csv(trn_metrics, csv.str(), m);
      }
      if (!trn_loss_gap.empty()) {
        std::ostringstream csv;
        write_loss_gap_csv(csv, gaps);
        save_csv(trn_loss_gap, csv.str(), m);
      }
    } else if (*evl) {
      const Checkpoint c = load_checkpoint(evl_model);
      const Dataset d = load_jsonl(evl_in);
      const auto preds = predict_all(c.student, c.tokenizer, d, decode_options(c, evl_answer_only));
      std::cout << "accuracy " << accuracy(preds) << " on " << preds.size() << " samples\n";
      std::map<std::string, long> modes;
      for (const Prediction& p : preds) ++modes[to_string(p.mode)];
      for (const auto& [mode, n] : modes) std::cout << "mode " << mode << ": " << n << "\n";
      if (!evl_out.empty()) {
        std::string text;
        for (const Prediction& p : preds) text += prediction_json(p, c.tokenizer).dump() + "\n";
        write_file_atomic(evl_out, text);
        write_manifest(evl_out, make_manifest(command, &c.config, c.config.seed, {evl_model, evl_in}));
      }
    } else if (*inf) {
      const Checkpoint c = load_checkpoint(inf_model);
      Dataset d;
      for (const std::string& q : inf_questions) {
        Sample s;
        s.id = "q" + std::to_string(d.size());
        s.question = q;
        s.answer = "?";
        d.push_back(s);
      }
      if (!inf_in.empty()) {
        for (const Sample& s : load_jsonl(inf_in)) d.push_back(s);
      }
      if (d.empty()) throw UsageError("infer needs --question or --input");
      for (const Sample& s : d) {
        const Prediction p = predict(c.student, c.tokenizer, s, decode_options(c, inf_answer_only));
        nlohmann::ordered_json j = prediction_json(p, c.tokenizer);
        j.erase("gold");
        j.erase("correct");
        std::cout << j.dump() << "\n";
      }
    } else if (*ana) {
      if (*bleu) {
        const Dataset cand = load_jsonl(bleu_cand);
        const Dataset ref = load_jsonl(bleu_ref);
        std::map<std::string, std::string> by_id;
        for (const Sample& s : ref) {
          if (s.rationale) by_id[s.id] = *s.rationale;
        }
        std::vector<std::string> cs, rs;
        for (const Sample& s : cand) {
          auto it = by_id.find(s.id);
          if (!s.rationale || it == by_id.end()) continue;
          cs.push_back(*s.rationale);
          rs.push_back(it->second);
        }
        std::cout << "bleu " << corpus_bleu(cs, rs) << " over " << cs.size() << " pairs\n";
      } else if (*eff) {
        const Checkpoint c = load_checkpoint(eff_model);
        const auto rows = efficiency_report(c.student, c.tokenizer, load_jsonl(eff_in), c.config.max_new_tokens);
        std::ostringstream csv;
        write_efficiency_csv(csv, rows);
        std::cout << csv.str();
        if (!eff_out.empty()) save_csv(eff_out, csv.str(), make_manifest(command, &c.config, c.config.seed, {eff_model, eff_in}));
      } else if (*att) {
        const Checkpoint c = load_checkpoint(att_model);
        const Dataset d = load_jsonl(att_in);
        if (att_index >= d.size()) throw UsageError("--index beyond the input file");
        const AttentionDump dump = export_attention(c.student, c.tokenizer, d[att_index], att_threshold, c.config.max_new_tokens);
        if (!dump.found_answer_marker) log_line("warning: no answer marker generated; using the last position");
        std::ostringstream csv;
        write_attention_csv(csv, dump);
        save_csv(att_out, csv.str(), make_manifest(command, &c.config, c.config.seed, {att_model, att_in}));
      } else if (*gap) {
        const Dataset d = load_jsonl(gap_in);
        std::vector<LossGapPoint> pts;
        std::vector<fs::path> inputs{gap_in};
        for (std::size_t i = 0; i < gap_models.size(); ++i) {
          const Checkpoint c = load_checkpoint(gap_models[i]);
          pts.push_back(loss_gap_point(c.student, c.tokenizer, d, c.config.objective, c.config.max_rationale_tokens,
                                       c.config.max_new_tokens, static_cast<int>(i)));
          inputs.push_back(gap_models[i]);
        }
        std::ostringstream csv;
        write_loss_gap_csv(csv, pts);
        std::cout << csv.str();
        save_csv(gap_out, csv.str(), make_manifest(command, nullptr, 0, inputs));
      }
    } else if (*ver) {
      const OracleReport r = oracle_suite(ver_seed);
      write_report_text(std::cout, r);
      if (!ver_csv.empty()) {
        std::ofstream out(ver_csv);
        write_report_csv(out, r);
      }
      if (!r.passed()) return static_cast<int>(ErrorCategory::numeric);
    }
  } catch (const atm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorCategory::input);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return static_cast<int>(ErrorCategory::internal);
  }
  return 0;
}
