#pragma once

// Experiment configuration: every hyperparameter of a run, readable from a
// JSON key-value file and overridable field by field.

#include <atm/error.hpp>
#include <atm/model.hpp>
#include <atm/perception.hpp>
#include <atm/sequences.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace atm {

enum class Objective { standard, pre, post, atm };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::standard: return "standard";
    case Objective::pre: return "pre";
    case Objective::post: return "post";
    case Objective::atm: return "atm";
  }
  return "standard";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "standard") return Objective::standard;
  if (s == "pre") return Objective::pre;
  if (s == "post") return Objective::post;
  if (s == "atm") return Objective::atm;
  throw ConfigError("unknown objective \"" + s + "\" (expected standard, pre, post or atm)");
}

enum class LabelingStrategy {
  discrepancy,
  // Baseline only: held-out post model answers correctly -> post, else pre.
  answer_correctness,
};

struct ExperimentConfig {
  // Student backbone (vocabulary size comes from the tokenizer).
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int max_seq_len = 256;
  int ffn_mult = 4;
  double init_std = 0.02;

  int batch_size = 4;
  double learning_rate = 1e-5;
  int epochs = 20;
  long warmup_steps = 1200;
  double lr_cycle_epochs = 1.0;  // cosine restart period, in epochs
  double lr_cycle_mult = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // 0 disables

  int max_rationale_tokens = kDefaultMaxRationaleTokens;
  int prefix_tokens = 50;
  bool scaled_attention = false;
  std::vector<Feature> features{Feature::word_count};

  std::uint64_t seed = 42;
  Objective objective = Objective::atm;

  int folds = 5;
  int labeling_epochs = -1;  // -1 = same as epochs
  LabelingStrategy labeling_strategy = LabelingStrategy::discrepancy;

  int vocab_min_count = 1;
  int max_new_tokens = 160;

  int effective_labeling_epochs() const { return labeling_epochs < 0 ? epochs : labeling_epochs; }

  ModelConfig model_config(int vocab) const {
    ModelConfig m;
    m.layers = layers;
    m.hidden = hidden;
    m.heads = heads;
    m.vocab = vocab;
    m.max_seq_len = max_seq_len;
    m.ffn_mult = ffn_mult;
    m.init_std = init_std;
    return m;
  }

  void validate() const {
    auto positive = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(layers > 0, "layers");
    positive(hidden > 0, "hidden");
    positive(heads > 0, "heads");
    positive(max_seq_len > 0, "max_seq_len");
    positive(ffn_mult > 0, "ffn_mult");
    positive(batch_size > 0, "batch_size");
    positive(learning_rate > 0, "learning_rate");
    positive(epochs > 0, "epochs");
    positive(max_rationale_tokens > 0, "max_rationale_tokens");
    positive(folds > 1, "folds - 1");
    positive(lr_cycle_epochs > 0, "lr_cycle_epochs");
    positive(lr_cycle_mult > 0, "lr_cycle_mult");
    positive(max_new_tokens > 0, "max_new_tokens");
    if (hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (prefix_tokens < 0) throw ConfigError("prefix_tokens must be >= 0");
    if (labeling_epochs == 0 || labeling_epochs < -1) throw ConfigError("labeling_epochs must be positive or -1");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must lie in [0, 1)");
    if (weight_decay < 0 || grad_clip < 0 || init_std < 0) throw ConfigError("negative regulariser setting");
    for (Feature f : features) {
      if (f == Feature::mean_dependency_distance) {
        throw ConfigError("feature mean_dependency_distance requires a dependency parser and is not available");
      }
    }
  }
};

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["heads"] = c.heads;
  j["max_seq_len"] = c.max_seq_len;
  j["ffn_mult"] = c.ffn_mult;
  j["init_std"] = c.init_std;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["warmup_steps"] = c.warmup_steps;
  j["lr_cycle_epochs"] = c.lr_cycle_epochs;
  j["lr_cycle_mult"] = c.lr_cycle_mult;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["max_rationale_tokens"] = c.max_rationale_tokens;
  j["prefix_tokens"] = c.prefix_tokens;
  j["scaled_attention"] = c.scaled_attention;
  j["features"] = nlohmann::ordered_json::array();
  for (Feature f : c.features) j["features"].push_back(to_string(f));
  j["seed"] = c.seed;
  j["objective"] = to_string(c.objective);
  j["folds"] = c.folds;
  j["labeling_epochs"] = c.labeling_epochs;
  j["labeling_strategy"] =
      c.labeling_strategy == LabelingStrategy::discrepancy ? "discrepancy" : "answer_correctness";
  j["vocab_min_count"] = c.vocab_min_count;
  j["max_new_tokens"] = c.max_new_tokens;
  return j;
}

// Applies every key present in j; unknown keys are rejected.
inline void apply_json(ExperimentConfig& c, const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "layers") c.layers = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "heads") c.heads = v.get<int>();
      else if (key == "max_seq_len") c.max_seq_len = v.get<int>();
      else if (key == "ffn_mult") c.ffn_mult = v.get<int>();
      else if (key == "init_std") c.init_std = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "warmup_steps") c.warmup_steps = v.get<long>();
      else if (key == "lr_cycle_epochs") c.lr_cycle_epochs = v.get<double>();
      else if (key == "lr_cycle_mult") c.lr_cycle_mult = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "max_rationale_tokens") c.max_rationale_tokens = v.get<int>();
      else if (key == "prefix_tokens") c.prefix_tokens = v.get<int>();
      else if (key == "scaled_attention") c.scaled_attention = v.get<bool>();
      else if (key == "features") {
        c.features.clear();
        for (const auto& f : v) c.features.push_back(feature_from_string(f.get<std::string>()));
      } else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "objective") c.objective = objective_from_string(v.get<std::string>());
      else if (key == "folds") c.folds = v.get<int>();
      else if (key == "labeling_epochs") c.labeling_epochs = v.get<int>();
      else if (key == "labeling_strategy") {
        const auto s = v.get<std::string>();
        if (s == "discrepancy") c.labeling_strategy = LabelingStrategy::discrepancy;
        else if (s == "answer_correctness") c.labeling_strategy = LabelingStrategy::answer_correctness;
        else throw ConfigError("unknown labeling_strategy \"" + s + "\"");
      } else if (key == "vocab_min_count") c.vocab_min_count = v.get<int>();
      else if (key == "max_new_tokens") c.max_new_tokens = v.get<int>();
      else throw ConfigError("unknown config key \"" + key + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key \"" + key + "\": " + e.what());
    }
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  apply_json(c, j);
  c.validate();
  return c;
}

}  // namespace atm
