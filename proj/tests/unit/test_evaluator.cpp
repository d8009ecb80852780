#include <atm/evaluator.hpp>
#include <atm/pipeline.hpp>
#include <atm/tasks.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

namespace {

using namespace atm;

using Preds = std::vector<std::optional<std::string>>;

Student<float> tiny_student(const Tokenizer& tok, int prefix) {
  ExperimentConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.max_seq_len = 128;
  c.prefix_tokens = prefix;
  c.objective = Objective::atm;
  return make_student(c, tok);
}

TEST(Accuracy, ConfusionFormula) {
  // tp = 2, tn = 2, fp = 1, fn = 1
  const Preds p{"yes", "yes", "no", "no", "yes", "no"};
  const std::vector<std::string> g{"yes", "yes", "no", "no", "no", "yes"};
  const Confusion c = confusion(p, g);
  EXPECT_EQ(c.tp, 2);
  EXPECT_EQ(c.tn, 2);
  EXPECT_EQ(c.fp, 1);
  EXPECT_EQ(c.fn, 1);
  EXPECT_NEAR(accuracy(p, g), 4.0 / 6.0, 1e-12);
}

TEST(Accuracy, AllCorrectAndMissingPredictions) {
  EXPECT_EQ(accuracy(Preds{"Yes.", "no"}, {"yes", "no"}), 1.0);
  const Preds missing{std::nullopt, std::nullopt};
  EXPECT_EQ(accuracy(missing, {"yes", "no"}), 0.0);
  EXPECT_EQ(accuracy(Preds{"yn", std::nullopt, "e"}, {"yn", "ab", "f"}), 1.0 / 3.0);
}

TEST(Accuracy, RejectsEmptyAndMismatched) {
  EXPECT_THROW(accuracy(Preds{}, {}), InputError);
  EXPECT_THROW(accuracy(Preds{"yes"}, {"yes", "no"}), InputError);
}

TEST(Bleu, IdentityAndNoOverlap) {
  EXPECT_NEAR(corpus_bleu({"the coin is heads up"}, {"the coin is heads up"}), 1.0, 1e-12);
  EXPECT_EQ(corpus_bleu({"alpha beta"}, {"gamma delta"}), 0.0);
  EXPECT_EQ(corpus_bleu({""}, {"gamma delta"}), 0.0);
  EXPECT_THROW(corpus_bleu({}, {}), InputError);
}

TEST(Bleu, HandCountedCorpus) {
  // 1-grams 5/6, 2-grams (3+1)/(5+1), 3-grams (2+1)/(4+1), 4-grams (1+1)/(3+1), equal lengths.
  EXPECT_NEAR(corpus_bleu({"the cat sat on the mat"}, {"the cat sat on a mat"}), std::pow(1.0 / 6.0, 0.25), 1e-9);
  // Short candidate: brevity penalty exp(1 - 4/2), 1-grams 2/2, higher orders 1/1, 1/1, 1/1.
  EXPECT_NEAR(corpus_bleu({"a b"}, {"a b c d"}), std::exp(1.0 - 2.0), 1e-9);
}

TEST(Efficiency, SummaryGroupsByMode) {
  std::vector<Prediction> preds(3);
  preds[0].emitted = TokenIds(4);
  preds[0].mode = DetectedMode::post;
  preds[1].emitted = TokenIds(10);
  preds[1].mode = DetectedMode::pre;
  preds[2].emitted = TokenIds(6);
  preds[2].mode = DetectedMode::post;
  const auto rows = summarize_efficiency("full", preds);
  ASSERT_EQ(rows.size(), 3u);
  for (const EfficiencyRow& r : rows) {
    if (r.mode == "all") {
      EXPECT_EQ(r.samples, 3);
      EXPECT_NEAR(r.mean_tokens, 20.0 / 3.0, 1e-12);
    } else if (r.mode == "post") {
      EXPECT_NEAR(r.mean_tokens, 5.0, 1e-12);
    } else {
      EXPECT_EQ(r.mode, "pre");
      EXPECT_EQ(r.samples, 1);
    }
  }
}

TEST(Efficiency, ReportStaysWithinBudget) {
  const Dataset d = gen_coin_flip(4, 1, 2, 3);
  const Tokenizer tok = build_tokenizer(d, 1);
  const Student<float> s = tiny_student(tok, 2);
  EXPECT_TRUE(efficiency_report(s, tok, Dataset{}, 5).empty());
  const auto rows = efficiency_report(s, tok, d, 5);
  double answer_only = -1;
  double full = -1;
  for (const EfficiencyRow& r : rows) {
    EXPECT_LE(r.mean_tokens, 5.0);
    EXPECT_GE(r.mean_seconds, 0.0);
    if (r.mode == "all") (r.inference == "full" ? full : answer_only) = r.mean_tokens;
  }
  EXPECT_GE(answer_only, 0.0);
  EXPECT_LE(answer_only, full);
  std::ostringstream csv;
  write_efficiency_csv(csv, rows);
  EXPECT_EQ(csv.str().rfind("inference,mode,samples,mean_tokens,mean_seconds\n", 0), 0u);
}

TEST(LossGap, PartitionsCoverTheEvalSet) {
  Dataset d = gen_coin_flip(5, 1, 1, 4);
  for (Sample& s : d) s.mode = 0;
  const Tokenizer tok = build_tokenizer(d, 1);
  const LossGapPoint pt = loss_gap_point(tiny_student(tok, 2), tok, d, Objective::atm, 300, 6, 3);
  EXPECT_EQ(pt.correct + pt.incorrect, 5);
  EXPECT_EQ(pt.epoch, 3);
  std::ostringstream csv;
  write_loss_gap_csv(csv, {pt});
  EXPECT_NE(csv.str().find("3,"), std::string::npos);
  LossGapPoint half;
  half.loss_incorrect = 2.0;
  EXPECT_FALSE(half.gap().has_value());
  half.loss_correct = 0.5;
  EXPECT_DOUBLE_EQ(*half.gap(), 1.5);
}

TEST(Attention, ShapeLabelsAndThreshold) {
  const Dataset d = gen_coin_flip(1, 1, 1, 8);
  const Tokenizer tok = build_tokenizer(d, 1);
  const Student<float> s = tiny_student(tok, 3);
  const AttentionDump all = export_attention(s, tok, d[0], 0.0, 4);
  const std::size_t len = all.labels.size();
  EXPECT_EQ(all.weights.rows(), 2);
  EXPECT_EQ(static_cast<std::size_t>(all.weights.cols()), len);
  EXPECT_EQ(all.query_position, len - 1);
  EXPECT_EQ(all.labels[0], "<p0>");
  EXPECT_EQ(all.labels[2], "<p2>");
  for (Eigen::Index h = 0; h < 2; ++h) EXPECT_NEAR(all.weights.row(h).sum(), 1.0, 1e-5);

  const AttentionDump sparse = export_attention(s, tok, d[0], 0.05, 4);
  for (Eigen::Index i = 0; i < sparse.weights.size(); ++i) {
    const double w = sparse.weights.data()[i];
    EXPECT_TRUE(w == 0.0 || (w >= 0.05 && w == all.weights.data()[i]));
  }
  std::ostringstream csv;
  write_attention_csv(csv, sparse);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Attention, CsvEscaping) {
  EXPECT_EQ(csv_escape("plain"), "plain");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
}

}  // namespace
