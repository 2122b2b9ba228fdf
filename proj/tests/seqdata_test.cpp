#include <random>

#include <gtest/gtest.h>

#include "pipa/seqdata.hpp"

namespace pipa {
namespace {

Example ex(int prompt, Tokens answer, Labels labels) {
  return Example{{prompt}, std::move(answer), std::move(labels), std::nullopt, std::nullopt};
}

PairedExample pair(int prompt, Labels rejected) {
  const std::size_t n = rejected.size();
  return PairedExample{{prompt}, ex(prompt, Tokens(n, 1), Labels(n, 1)), ex(prompt, Tokens(n, 0), rejected)};
}

TEST(Example, Invariants) {
  EXPECT_THROW(ex(0, {}, {}).validate(), InvalidInput);
  EXPECT_THROW(ex(0, {1, 2}, {1}).validate(), InvalidInput);
  Example e = ex(0, {1, 2, 3, 4}, {1, 1, 0, 1});
  e.step_starts = std::vector<int>{0, 2};
  EXPECT_THROW(e.validate(), InvalidInput);  // label changes inside step 2
  e.labels = {1, 1, 0, 0};
  EXPECT_NO_THROW(e.validate());
  EXPECT_THROW(Dataset::unpaired({e}, Level::kAnswer), InvalidInput);
  EXPECT_NO_THROW(Dataset::unpaired({e}, Level::kStep));
}

TEST(DecouplePairs, ChosenFirstThenRejected) {
  const Dataset paired = Dataset::paired({pair(0, {0, 0, 0}), pair(1, {1, 1, 0}), pair(2, {0, 0, 0})}, Level::kStep);
  const Dataset flat = decouple_pairs(paired);
  ASSERT_EQ(flat.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(flat.examples()[i].all_correct());
    EXPECT_EQ(flat.examples()[i].prompt, Tokens{static_cast<int>(i)});
    EXPECT_EQ(flat.examples()[i + 3].prompt, Tokens{static_cast<int>(i)});
  }
  EXPECT_EQ(flat.examples()[4].labels, (Labels{1, 1, 0}));
}

TEST(DecouplePairs, EmptyAndAlreadyUnpaired) {
  EXPECT_EQ(decouple_pairs(Dataset::paired({}, Level::kAnswer)).size(), 0u);
  EXPECT_THROW(decouple_pairs(Dataset::unpaired({}, Level::kAnswer)), InvalidInput);
}

TEST(DecouplePairs, DoublesCardinality) {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 20; ++n) {
    std::vector<PairedExample> ps;
    for (int i = 0; i < n; ++i) ps.push_back(pair(i % 3, {static_cast<std::uint8_t>(rng() % 2), 0}));
    EXPECT_EQ(decouple_pairs(Dataset::paired(ps, Level::kStep)).size(), 2u * static_cast<std::size_t>(n));
  }
}

Dataset unpaired_fixture() {
  std::vector<Example> rs;
  for (int i = 0; i < 2; ++i) rs.push_back(ex(0, {i, i}, {1, 1}));
  for (int i = 0; i < 5; ++i) rs.push_back(ex(0, {i, 3}, {0, 0}));
  for (int i = 0; i < 4; ++i) rs.push_back(ex(1, {i, 2}, {0, 0}));
  return Dataset::unpaired(rs, Level::kAnswer);
}

TEST(PairByProblem, MinRuleAndDegeneratePrompt) {
  const Dataset paired = pair_by_problem(unpaired_fixture(), 7);
  ASSERT_EQ(paired.size(), 2u);
  for (const auto& p : paired.pairs()) {
    EXPECT_EQ(p.prompt, Tokens{0});
    EXPECT_TRUE(p.chosen.all_correct());
    EXPECT_FALSE(p.rejected.all_correct());
  }
}

TEST(PairByProblem, SurplusCorrectAnswersDropped) {
  std::vector<Example> rs;
  for (int i = 0; i < 4; ++i) rs.push_back(ex(0, {i}, {1}));
  rs.push_back(ex(0, {0}, {0}));
  EXPECT_EQ(pair_by_problem(Dataset::unpaired(rs, Level::kAnswer), 0).size(), 1u);
}

TEST(PairByProblem, SeededDeterminism) {
  const Dataset a = pair_by_problem(unpaired_fixture(), 42);
  const Dataset b = pair_by_problem(unpaired_fixture(), 42);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.pairs()[i].chosen.answer, b.pairs()[i].chosen.answer);
    EXPECT_EQ(a.pairs()[i].rejected.answer, b.pairs()[i].rejected.answer);
  }
}

TEST(LabelsFromQ, ThresholdExamples) {
  EXPECT_EQ(labels_from_q(std::vector<double>{1.0, 0.6, 0.3}, false, 0.5), (Labels{1, 1, 0}));
  EXPECT_EQ(labels_from_q(std::vector<double>{0.5}, false, 0.5), (Labels{1}));
  EXPECT_EQ(labels_from_q(std::vector<double>{-1.0, 0.2, -0.3}, true, 0.5), (Labels{1, 1, 1}));
}

TEST(LabelsFromQ, Errors) {
  EXPECT_THROW(labels_from_q(std::vector<double>{1.2}, false, 0.5), InvalidInput);
  EXPECT_THROW(labels_from_q(std::vector<double>{0.0}, false, -1.0), InvalidInput);
  EXPECT_THROW(labels_from_q(std::vector<double>{0.0}, false, 1.5), InvalidInput);
}

TEST(LabelsFromQ, CorrectAnswersAndMonotoneThreshold) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> th(-0.999, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> q(6);
    for (double& v : q) v = u(rng);
    double lo = th(rng);
    double hi = th(rng);
    if (lo > hi) std::swap(lo, hi);
    EXPECT_EQ(labels_from_q(q, true, hi), Labels(6, 1));
    const Labels a = labels_from_q(q, false, lo);
    const Labels b = labels_from_q(q, false, hi);
    for (std::size_t k = 0; k < q.size(); ++k) EXPECT_LE(b[k], a[k]);
  }
}

TEST(ExpandStepLabels, Examples) {
  EXPECT_EQ(expand_step_labels(Labels{1, 0}, std::vector<int>{0, 2}, 4), (Labels{1, 1, 0, 0}));
  EXPECT_EQ(expand_step_labels(Labels{0}, std::vector<int>{0}, 3), (Labels{0, 0, 0}));
  EXPECT_EQ(expand_step_labels(Labels{1, 0, 1}, std::vector<int>{0, 1, 2}, 3), (Labels{1, 0, 1}));
  EXPECT_THROW(expand_step_labels(Labels{1, 0}, std::vector<int>{0, 4}, 4), InvalidInput);
  EXPECT_THROW(expand_step_labels(Labels{1, 0}, std::vector<int>{1, 2}, 4), InvalidInput);
}

TEST(ExpandStepLabels, RegroupingRecoversStepLabels) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t len = 1 + rng() % 12;
    std::vector<int> starts{0};
    for (int t = 1; t < static_cast<int>(len); ++t) {
      if (rng() % 3 == 0) starts.push_back(t);
    }
    Labels steps(starts.size());
    for (auto& c : steps) c = static_cast<std::uint8_t>(rng() % 2);
    Example e{{0}, Tokens(len, 0), expand_step_labels(steps, starts, len), starts, std::nullopt};
    EXPECT_NO_THROW(e.validate());
    EXPECT_EQ(step_labels_of(e), steps);
  }
}

TEST(RelabelFromQ, UsesStoredQValues) {
  Example neg{{0}, {1, 2, 3}, {1, 0, 0}, std::vector<int>{0, 1, 2}, std::vector<double>{0.9, 0.6, -0.2}};
  Example pos{{0}, {1, 1, 1}, {1, 1, 1}, std::vector<int>{0, 1, 2}, std::vector<double>{-0.9, -0.6, -0.2}};
  const Dataset d = relabel_from_q(Dataset::unpaired({neg, pos}, Level::kStep), 0.5);
  EXPECT_EQ(d.examples()[0].labels, (Labels{1, 1, 0}));
  EXPECT_EQ(d.examples()[1].labels, (Labels{1, 1, 1}));
}

}  // namespace
}  // namespace pipa
