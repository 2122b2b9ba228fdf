#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "pipa/io.hpp"
#include "support.hpp"

namespace pipa {
namespace {

std::vector<std::uint64_t> bits(std::span<const double> v) {
  std::vector<std::uint64_t> out;
  for (double x : v) out.push_back(std::bit_cast<std::uint64_t>(x));
  return out;
}

TEST(DatasetJsonl, UnpairedStepRoundTrip) {
  const World w = make_world(3, 2, 3, 3);
  const Dataset d = sample_dataset(w, 200, Level::kStep, 4);
  const Dataset back = dataset_from_jsonl(dataset_to_jsonl(d));
  EXPECT_EQ(back.level(), Level::kStep);
  EXPECT_FALSE(back.is_paired());
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& a = d.examples()[i];
    const auto& b = back.examples()[i];
    EXPECT_EQ(a.prompt, b.prompt);
    EXPECT_EQ(a.answer, b.answer);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.step_starts, b.step_starts);
    ASSERT_TRUE(b.q_values.has_value());
    EXPECT_EQ(bits(*a.q_values), bits(*b.q_values));
  }
  EXPECT_EQ(dataset_to_jsonl(back), dataset_to_jsonl(d));
}

TEST(DatasetJsonl, PairedAnswerRoundTrip) {
  const World w = make_world(3, 2, 3, 2);
  const Dataset pairs = pair_by_problem(sample_dataset(w, 300, Level::kAnswer, 1), 2);
  ASSERT_FALSE(pairs.empty());
  const std::string text = dataset_to_jsonl(pairs);
  const Dataset back = dataset_from_jsonl(text);
  EXPECT_TRUE(back.is_paired());
  EXPECT_EQ(back.level(), Level::kAnswer);
  ASSERT_EQ(back.size(), pairs.size());
  EXPECT_EQ(dataset_to_jsonl(back), text);
  EXPECT_NE(text.find("\"pair_id\":0"), std::string::npos);
}

TEST(DatasetJsonl, MalformedRecordsNameTheLine) {
  const std::string good = R"({"prompt":[0],"answer":[1],"labels":[1],"pair_id":null})";
  EXPECT_NO_THROW(dataset_from_jsonl(good + "\n\n"));
  auto fails_on_line = [](const std::string& text, const std::string& line) {
    try {
      dataset_from_jsonl(text);
    } catch (const InvalidInput& e) {
      return std::string(e.what()).find(line) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(fails_on_line(good + "\n{not json", "line 2"));
  EXPECT_TRUE(fails_on_line(good + "\n" + R"({"prompt":[0],"answer":[1,2],"labels":[1]})", "line 2"));
  EXPECT_TRUE(fails_on_line(R"({"prompt":[0],"answer":[1],"labels":[2]})", "line 1"));
  EXPECT_TRUE(fails_on_line(R"({"prompt":[0],"answer":[1.5],"labels":[1]})", "line 1"));
  EXPECT_TRUE(fails_on_line(R"([1,2])", "line 1"));
  // A lone paired record has no rejected partner.
  EXPECT_THROW(dataset_from_jsonl(R"({"prompt":[0],"answer":[1],"labels":[1],"pair_id":0})"), InvalidInput);
}

TEST(Checkpoint, PolicyRoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  const ModelShape s{4, 3, 2, 3};
  const ModelBundle b = testing::random_bundle(rng, s, 3.0);
  std::ostringstream os;
  write_policy(os, b.policy);
  std::istringstream is(os.str());
  const TabularPolicy p = read_policy(is);
  EXPECT_EQ(p.shape(), s);
  EXPECT_FALSE(p.frozen());
  EXPECT_EQ(bits(p.logits()), bits(b.policy.logits()));
}

TEST(Checkpoint, BundleRoundTripKeepsFrozenPriorAndInfinities) {
  std::mt19937_64 rng(2);
  const ModelShape s{3, 2, 1, 2};
  ModelBundle b = testing::random_bundle(rng, s);
  TabularPolicy prior(s);
  prior.set_row_probabilities(0, std::vector<double>{0.0, 0.25, 0.75});
  b.prior = prior.frozen_copy();
  const std::string text = bundle_to_text(b);
  const ModelBundle back = bundle_from_text(text);
  EXPECT_TRUE(back.prior.frozen());
  EXPECT_EQ(bits(back.prior.logits()), bits(b.prior.logits()));
  EXPECT_EQ(bits(back.value.raw()), bits(b.value.raw()));
  EXPECT_EQ(bits(back.parameters()), bits(b.parameters()));
  EXPECT_TRUE(std::isinf(back.prior.logits()[0]));
  EXPECT_EQ(bundle_to_text(back), text);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  std::mt19937_64 rng(3);
  const ModelShape s{2, 2, 1, 1};
  std::ostringstream os;
  write_policy(os, testing::random_bundle(rng, s).policy);
  const std::string text = os.str();
  auto bad = [](std::string t) {
    std::istringstream is(t);
    EXPECT_THROW(read_policy(is), InvalidInput) << t;
  };
  bad("pipa-policy v2\n" + text.substr(text.find('\n') + 1));
  bad(text.substr(0, text.rfind("row")));
  std::string extra = text;
  extra.insert(extra.find('\n', extra.find("row")), " 0.5");
  bad(extra);
  std::string nan = text;
  nan.replace(nan.find('|') + 2, 1, "nan");
  bad(nan);
}

TEST(WorldFile, RoundTripPreservesOracles) {
  WorldOptions opt;
  opt.fault = std::vector<double>{0.2, 0.3, 0.5};
  const World w = make_world(9, 2, 3, 3, opt);
  const World back = world_from_text(world_to_text(w));
  EXPECT_EQ(world_to_text(back), world_to_text(w));
  for (int x = 0; x < w.prompts; ++x) {
    for (const auto& y : testing::all_answers(w.vocab, w.len)) {
      EXPECT_EQ(exact_posterior(w, x, y), exact_posterior(back, x, y));
    }
  }
  EXPECT_THROW(world_from_text("pipa-world v1\nprompts 1 vocab 2\n"), InvalidInput);
}

TEST(Files, MissingAndUnwritablePaths) {
  EXPECT_THROW(read_text("/nonexistent/dir/file.txt"), ResourceError);
  EXPECT_THROW(write_text("/nonexistent/dir/file.txt", "x"), ResourceError);
  const auto dir = std::filesystem::temp_directory_path() / "pipa_io_test";
  std::filesystem::create_directories(dir);
  const World w = make_world(1, 1, 2, 2);
  save_world(dir / "w.txt", w);
  EXPECT_EQ(world_to_text(load_world(dir / "w.txt")), world_to_text(w));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace pipa
