#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "pipa/verify.hpp"
#include "support.hpp"

namespace pipa {
namespace {

TEST(Equivalence, DpoIdentityHoldsOnThousandInputs) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto rep = check_dpo_equivalence(seed, 1000);
    EXPECT_TRUE(rep.passed) << rep.summary();
    EXPECT_LT(rep.max_discrepancy, 1e-10);
    EXPECT_EQ(rep.trials, 1000u);
  }
}

TEST(Equivalence, KtoIdentityHoldsOnThousandInputs) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto rep = check_kto_equivalence(seed, 1000);
    EXPECT_TRUE(rep.passed) << rep.summary();
    EXPECT_LT(rep.max_discrepancy, 1e-10);
  }
}

TEST(Equivalence, BayesFormReferenceValues) {
  // Equal ratios on both sides give posterior 1/2.
  EXPECT_NEAR(-std::log(0.3 * 0.2 / (0.3 * 0.2 + 0.2 * 0.3)), std::log(2.0), 1e-15);
  // z = 0 and f equal to the prior: σ(0) = f / (f + p) = 1/2.
  Tape t;
  EXPECT_DOUBLE_EQ(sigmoid(log(t.constant(0.4)) - std::log(0.4)).value(), 0.5);
  EXPECT_THROW(check_dpo_equivalence(1, 0), InvalidInput);
}

TEST(Report, SummaryAndCsvRow) {
  VerificationReport rep{"x", 3, 0.25, 0.5, false, {{"b", 2.0}, {"a", 1.0}}};
  rep.settle();
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.summary(), "x: PASS trials=3 max_discrepancy=0.25 tolerance=0.5 a=1 b=2");
  EXPECT_EQ(rep.csv_row(), "x,3,0.25,0.5,1,a=1;b=2");
  rep.max_discrepancy = 0.75;
  rep.settle();
  EXPECT_FALSE(rep.passed);
}

// With f and g set to the world's true laws, the PIPA maps under the exact
// priors reproduce the Bayes token posterior at both label levels.
TEST(ExactPrior, TrueModelsGiveExactPosteriors) {
  const World w = make_world(41, 2, 3, 3);
  const ModelShape s = w.shape();
  std::vector<Example> records;
  for (int x = 0; x < w.prompts; ++x) {
    for (const auto& y : testing::all_answers(w.vocab, w.len)) {
      records.push_back(Example{{x}, y, std::vector<std::uint8_t>(y.size(), 1), std::nullopt, std::nullopt});
    }
  }
  for (Level level : {Level::kStep, Level::kAnswer}) {
    ValueTable g(s);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      const auto [x, hist] = s.key(r);
      const double v = exact_value_target(w, x, hist, level);
      g.mutable_raw()[r] = std::log(v / (1.0 - v));
    }
    for (LossKind kind : {LossKind::kPipaM, LossKind::kPipaN}) {
      ModelBundle b = ModelBundle::make(world_policy(w, WorldLaw::kPositive, w.len - 1), exact_prior(w, kind, level));
      b.value = g;
      EXPECT_LT(posterior_error(w, b, records, kind, level, 1e-6), 1e-9) << to_string(kind);
      EXPECT_LT(value_error(w, b, records, level), 1e-12);
    }
  }
}

TEST(ExactPrior, StepLevelNegativePriorIsPostFaultLaw) {
  const World w = make_world(42, 2, 3, 2);
  auto logits = [](const TabularPolicy& p) { return std::vector<double>(p.logits().begin(), p.logits().end()); };
  EXPECT_EQ(logits(exact_prior(w, LossKind::kPipaN, Level::kStep)), logits(w.negative));
  EXPECT_TRUE(exact_prior(w, LossKind::kPipaN, Level::kStep).frozen());
  EXPECT_EQ(logits(exact_prior(w, LossKind::kPipaM, Level::kStep)), logits(exact_prior(w, LossKind::kPipaM, Level::kAnswer)));
}

TrainConfig quick_train() {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.batch_size = 200;
  cfg.epochs = 30;
  cfg.schedule = LrSchedule::kLinear;
  return cfg;
}

TEST(Recovery, TvShrinksWithSampleSize) {
  const World w = make_world(43, 2, 3, 2);
  RecoveryOptions opt;
  opt.train = quick_train();
  for (LossKind kind : {LossKind::kPipaM, LossKind::kPipaN}) {
    opt.kind = kind;
    opt.n = 100;
    const auto small = recovery_experiment(w, opt);
    opt.n = 20000;
    const auto large = recovery_experiment(w, opt);
    EXPECT_LT(large.tv, small.tv) << to_string(kind);
    EXPECT_LT(large.oracle_tv, small.oracle_tv);
    EXPECT_EQ(large.report.trials, 20000u);
    EXPECT_EQ(large.report.max_discrepancy, large.tv);
  }
}

TEST(Recovery, OracleTvMatchesSupportImplementation) {
  const World w = make_world(44, 3, 3, 2);
  const Dataset d = sample_dataset(w, 3000, Level::kStep, 5);
  EXPECT_NEAR(count_oracle_tv(w, d), testing::count_mle_tv(w, d), 1e-12);
}

TEST(Recovery, PipaNConvergesToLabelLikelihoodOptimum) {
  const World w = make_world(45, 2, 3, 2);
  const Dataset d = sample_dataset(w, 20000, Level::kStep, 2);
  RecoveryOptions opt;
  opt.kind = LossKind::kPipaN;
  opt.train = quick_train();
  opt.train.epochs = 80;
  const auto r = recovery_experiment(w, d, opt);
  ASSERT_TRUE(r.report.aux.count("label_mle_tv"));
  EXPECT_NEAR(r.tv, r.report.aux.at("label_mle_tv"), 0.01);
}

TEST(Recovery, FrozenValueIsWorseThanTrained) {
  const World w = make_world(46, 2, 3, 2);
  const Dataset d = sample_dataset(w, 10000, Level::kStep, 3);
  for (LossKind kind : {LossKind::kPipaM, LossKind::kPipaN}) {
    RecoveryOptions opt;
    opt.kind = kind;
    opt.train = quick_train();
    const auto trained = recovery_experiment(w, d, opt);
    opt.train.freeze_value = true;
    const auto frozen = recovery_experiment(w, d, opt);
    EXPECT_LT(trained.posterior_error, frozen.posterior_error) << to_string(kind);
    EXPECT_LT(trained.value_error, 0.1);
  }
}

TEST(Recovery, FittedPriorModeRuns) {
  const World w = make_world(47, 2, 3, 2);
  RecoveryOptions opt;
  opt.n = 3000;
  opt.prior = PriorMode::kFitted;
  opt.sft_epochs = 100;
  opt.train = quick_train();
  opt.train.epochs = 5;
  const auto r = recovery_experiment(w, opt);
  EXPECT_EQ(r.report.aux.at("exact_prior"), 0.0);
  EXPECT_TRUE(std::isfinite(r.tv));
}

TEST(ClipSurvey, OneEntryPerEpochAndRare) {
  const World w = make_world(48, 2, 3, 2);
  RecoveryOptions opt;
  opt.n = 5000;
  opt.train = quick_train();
  opt.train.lr = 0.01;
  opt.train.epochs = 10;
  const auto r = recovery_experiment(w, opt);
  const auto survey = clip_rate_survey(r.run.log);
  ASSERT_EQ(survey.size(), 10u);
  for (double c : survey) {
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
  EXPECT_EQ(survey.front(), r.run.log.epoch_mean(0, &MetricsRow::clip_rate));
  EXPECT_LT(r.final_clip_rate, 0.05);
}

TEST(Ablation, StepLabelsProtectCorrectPrefixes) {
  WorldOptions wo;
  wo.fault = std::vector<double>{0.0, 0.0, 0.2, 0.8};
  const World w = make_world(31, 2, 3, 4, wo);
  ASSERT_GE(w.correct_prefix_mass(), 0.5);
  AblationOptions opt;
  opt.train.lr = 0.05;
  opt.train.batch_size = 64;
  opt.train.epochs = 10;
  opt.include_pipa = true;
  const auto rep = step_vs_answer_ablation(w, opt);
  EXPECT_TRUE(rep.passed) << rep.summary();
  EXPECT_GT(rep.aux.at("reward_pos_step_dpo_l1"), rep.aux.at("reward_pos_dpo"));
  EXPECT_TRUE(rep.aux.count("reward_pos_pipa_m_step"));
}

TEST(Ablation, ArmsCoincideWhenFaultsHitTheFirstToken) {
  // k = 1 always: every rejected token is labelled 0, so the step mask is vacuous.
  WorldOptions wo;
  wo.fault = std::vector<double>{1.0, 0.0, 0.0};
  const World w = make_world(32, 2, 3, 3, wo);
  EXPECT_EQ(w.correct_prefix_mass(), 0.0);
  AblationOptions opt;
  opt.n = 1000;
  opt.train.lr = 0.05;
  opt.train.batch_size = 50;
  opt.train.epochs = 3;
  const auto rep = step_vs_answer_ablation(w, opt);
  EXPECT_NEAR(rep.aux.at("reward_pos_dpo"), rep.aux.at("reward_pos_step_dpo_l1"), 1e-9);
}

TEST(ThresholdSweep, ReportsEveryThreshold) {
  const World w = make_world(49, 2, 3, 3);
  ThresholdSweepOptions opt;
  opt.n = 1500;
  opt.train = quick_train();
  opt.train.epochs = 5;
  const auto rep = threshold_sweep(w, opt);
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.trials, opt.thresholds.size());
  for (const char* key : {"score@-0.5", "score@0", "score@0.5", "score@0.9"}) {
    ASSERT_TRUE(rep.aux.count(key)) << key;
    EXPECT_LE(rep.aux.at(key), 0.0);
  }
  const double best = rep.aux.at("best_threshold");
  EXPECT_TRUE(std::find(opt.thresholds.begin(), opt.thresholds.end(), best) != opt.thresholds.end());
  opt.thresholds.clear();
  EXPECT_THROW(threshold_sweep(w, opt), InvalidInput);
}

}  // namespace
}  // namespace pipa
