#include <atm/config.hpp>
#include <atm/gradcheck.hpp>
#include <atm/perception.hpp>
#include <atm/student.hpp>
#include <atm/verification.hpp>

#include <gtest/gtest.h>

#include <numeric>
#include <random>

namespace {

using namespace atm;

Mat<double> random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  return normal_matrix<double>(r, c, 1.0, rng);
}

TEST(Features, WordCountRendering) {
  const Tokenizer tok;
  const std::vector<Feature> f{Feature::word_count};
  EXPECT_EQ(build_features("Is Christmas celebrated during winter?", f, tok).text, "number of words: 5");
}

TEST(Features, EmptyFeatureListGivesNoTokens) {
  const Tokenizer tok;
  const FeatureTokens f = build_features("Any question?", std::vector<Feature>{}, tok);
  EXPECT_TRUE(f.text.empty());
  EXPECT_TRUE(f.ids.empty());
}

TEST(Features, ReadabilityAppendsRoundedPerplexity) {
  const Tokenizer tok;
  const std::vector<Feature> f{Feature::word_count, Feature::readability};
  const FeatureTokens out = build_features("Is it up?", f, tok, [](std::string_view) { return 12.3456; });
  EXPECT_EQ(out.text, "number of words: 3 Perplexity: 12.35");
}

TEST(Features, ReadabilityUsesBackbonePerplexity) {
  const Tokenizer tok = Tokenizer::build(std::vector<std::string>{"Is the coin up?"});
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 1;
  cfg.vocab = tok.vocab_size();
  cfg.max_seq_len = 64;
  auto zero = TinyTransformer<double>::zeros(cfg);
  // A zero model is uniform, so its perplexity is the vocabulary size.
  EXPECT_NEAR(question_perplexity(zero, tok, "Is the coin up?"), tok.vocab_size(), 1e-9);
}

TEST(Features, DependencyDistanceIsRejected) {
  const Tokenizer tok;
  const std::vector<Feature> f{Feature::mean_dependency_distance};
  EXPECT_THROW(build_features("q?", f, tok), ConfigError);
  ExperimentConfig c;
  c.features = f;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Perceive, ZeroProjectionsReturnQueries) {
  PerceptionModule<double> m(3, 4, 1, false, 1);
  m.w_q().value.setZero();
  m.w_k().value.setZero();
  m.w_v().value.setZero();
  const Mat<double> p = m.perceive(random_matrix(5, 4, 2));
  EXPECT_EQ(p, m.query().value);
}

TEST(Perceive, SingleKeyTakesFullWeight) {
  PerceptionModule<double> m(2, 4, 2, false, 3, 0.5);
  const Mat<double> d = random_matrix(1, 4, 4);
  const Mat<double> p = m.perceive(d);
  const Mat<double> v = d * m.w_v().value;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(p(i, j), v(0, j) + m.query().value(i, j), 1e-12);
  }
}

TEST(Perceive, MatchesDenseLoopOracle) {
  PerceptionModule<double> m(2, 4, 1, false, 5, 0.5);
  const Mat<double> d = random_matrix(2, 4, 6);
  const Mat<double> p = m.perceive(d);
  const auto want = oracle::perceive(oracle::copy(m.query().value), oracle::copy(m.w_q().value),
                                     oracle::copy(m.w_k().value), oracle::copy(m.w_v().value), oracle::copy(d), 1, 1.0);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(p(i, j), want[i][j], 1e-9);
  }
}

TEST(Perceive, ScaledVariantDividesScores) {
  PerceptionModule<double> plain(2, 4, 1, false, 7, 0.5);
  PerceptionModule<double> scaled(2, 4, 1, true, 7, 0.5);
  const Mat<double> d = random_matrix(3, 4, 8);
  const auto want = oracle::perceive(oracle::copy(scaled.query().value), oracle::copy(scaled.w_q().value),
                                     oracle::copy(scaled.w_k().value), oracle::copy(scaled.w_v().value),
                                     oracle::copy(d), 1, 0.5);
  const Mat<double> p = scaled.perceive(d);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(p(i, j), want[i][j], 1e-12);
  }
  EXPECT_GT((plain.perceive(d) - p).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Perceive, AttentionRowsAreStochastic) {
  PerceptionModule<double> m(4, 8, 2, false, 9, 0.5);
  std::vector<Mat<double>> probs;
  m.perceive(random_matrix(6, 8, 10), &probs);
  ASSERT_EQ(probs.size(), 2u);
  for (const Mat<double>& pr : probs) {
    for (Eigen::Index r = 0; r < pr.rows(); ++r) EXPECT_NEAR(pr.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(Perceive, KeyPermutationLeavesOutputUnchanged) {
  PerceptionModule<double> m(3, 8, 2, false, 11, 0.5);
  const Mat<double> d = random_matrix(7, 8, 12);
  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), Rng(13));
  Mat<double> shuffled(7, 8);
  for (int i = 0; i < 7; ++i) shuffled.row(i) = d.row(perm[i]);
  EXPECT_LT((m.perceive(d) - m.perceive(shuffled)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Perceive, OutputShapeIndependentOfInputLength) {
  PerceptionModule<double> m(5, 8, 2, false, 14);
  for (int len : {1, 3, 17}) {
    const Mat<double> p = m.perceive(random_matrix(len, 8, 15 + len));
    EXPECT_EQ(p.rows(), 5);
    EXPECT_EQ(p.cols(), 8);
  }
}

TEST(Perceive, RejectsBadInput) {
  PerceptionModule<double> m(2, 8, 2, false, 16);
  EXPECT_THROW(m.perceive(Mat<double>(0, 8)), InputError);
  EXPECT_THROW(m.perceive(random_matrix(3, 6, 17)), InputError);
}

TEST(AttachPrefix, DefaultLengthAndShapeChecks) {
  ExperimentConfig cfg;
  EXPECT_EQ(cfg.prefix_tokens, 50);
  PerceptionModule<float> m(cfg.prefix_tokens, cfg.hidden, cfg.heads, cfg.scaled_attention, 1);
  const Mat<float> p = m.perceive(Mat<float>::Ones(4, cfg.hidden));
  ModelConfig backend = cfg.model_config(100);
  EXPECT_EQ(attach_prefix(p, backend).rows(), 50);
  backend.hidden = 32;
  EXPECT_THROW(attach_prefix(p, backend), InputError);
}

TEST(AttachPrefix, ZeroLengthPrefixIsANoOp) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.vocab = 10;
  cfg.max_seq_len = 16;
  TinyTransformer<double> model(cfg, 1);
  const Mat<double> empty = attach_prefix(Mat<double>(0, 8), cfg);
  const TokenIds ids{1, 4, 7};
  EXPECT_EQ(model.logits(ids, &empty), model.logits(ids));
  Student<double> s;
  s.slm = model;
  s.perception.emplace(0, 8, 2, false, 2);
  EXPECT_FALSE(s.adaptive());
}

TEST(EndToEnd, GradientsReachQueriesAndProjections) {
  Student<double> s;
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 1;
  cfg.vocab = 16;
  cfg.max_seq_len = 16;
  cfg.init_std = 0.3;
  s.slm = TinyTransformer<double>(cfg, 21);
  s.perception.emplace(2, 8, 1, false, 22, 0.3);
  const ShiftedExample ex = shift(TokenIds{1, 5, 9, 2, 11, 3}, std::vector<bool>{false, false, true, true, true, true});
  const TokenIds pids{4, 8, 15};
  std::vector<Parameter<double>*> params = s.perception->parameters();
  const GradCheckResult r = check_gradients(params, [&](Tape<double>& tape) {
    return s.loss(tape, ex, pids, 1.0 / static_cast<double>(ex.scored()));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter;
  EXPECT_GT(s.perception->query().grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(s.perception->w_q().grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(s.perception->w_k().grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(s.perception->w_v().grad.cwiseAbs().maxCoeff(), 0.0);
}

}  // namespace
