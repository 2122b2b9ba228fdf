#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <gtest/gtest.h>

#include "pipa/experiment.hpp"

namespace pipa {
namespace {

class Scratch {
 public:
  explicit Scratch(const std::string& name) : root_(fs::temp_directory_path() / ("pipa_experiment_" + name)) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Scratch() { fs::remove_all(root_); }
  fs::path operator/(const std::string& p) const { return root_ / p; }

 private:
  fs::path root_;
};

ExperimentConfig small_config(const fs::path& dir) {
  ExperimentConfig c;
  c.world.seed = 5;
  c.world.prompts = 2;
  c.world.vocab = 3;
  c.world.len = 2;
  c.data.n = 600;
  c.data.levels = "both";
  c.data.pairing = true;
  c.train.loss.kind = LossKind::kPipaM;
  c.train.lr = 0.05;
  c.train.batch_size = 100;
  c.train.epochs = 3;
  c.train.probe_size = 64;
  c.verify.checks = {"dpo-equivalence", "kto-equivalence", "recovery", "clip-rate"};
  c.verify.trials = 200;
  c.verify.tv_tolerance = 0.5;
  c.output_dir = dir.string();
  return c;
}

std::string slurp(const fs::path& p) { return read_text(p); }

int count_substr(const std::string& s, const std::string& needle) {
  int n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

void expect_well_formed_svg(const fs::path& p) {
  boost::property_tree::ptree tree;
  std::istringstream in(slurp(p));
  ASSERT_NO_THROW(boost::property_tree::read_xml(in, tree)) << p;
  EXPECT_EQ(tree.count("svg"), 1u);
}

TEST(Pipeline, RepeatedRunsAreByteIdentical) {
  Scratch s("determinism");
  std::ostringstream log;
  for (const char* name : {"a", "b"}) {
    const ExperimentConfig c = small_config(s / name);
    cmd_gen(c, log);
    cmd_train(c, log);
    EXPECT_TRUE(cmd_verify(c, log));
    cmd_report(c.output_dir, {c.output_dir}, log);
  }
  for (const char* file : {"world.txt", "dataset_step.jsonl", "dataset_answer.jsonl", "pairs_step.jsonl", "model.txt",
                           "metrics.csv", "verify.csv"}) {
    EXPECT_EQ(slurp(s / "a" / file), slurp(s / "b" / file)) << file;
  }
  EXPECT_EQ(slurp(s / "a" / "report.txt").substr(slurp(s / "a" / "report.txt").find(':')),
            slurp(s / "b" / "report.txt").substr(slurp(s / "b" / "report.txt").find(':')));
  const auto ma = nlohmann::json::parse(slurp(s / "a" / "manifest.json"));
  const auto mb = nlohmann::json::parse(slurp(s / "b" / "manifest.json"));
  EXPECT_EQ(ma["files"]["metrics.csv"], mb["files"]["metrics.csv"]);
  EXPECT_EQ(ma["files"]["metrics.csv"], sha256_hex(slurp(s / "a" / "metrics.csv")));
}

TEST(Gen, StepRecordsCarryStepsAndPairsRespectClassCounts) {
  Scratch s("gen");
  const ExperimentConfig c = small_config(s / "run");
  std::ostringstream log;
  cmd_gen(c, log);
  const RunLayout run{c.output_dir};
  const Dataset steps = load_dataset(run.dataset(Level::kStep));
  EXPECT_EQ(steps.level(), Level::kStep);
  for (const auto& e : steps.examples()) EXPECT_TRUE(e.step_starts.has_value());
  const Dataset answers = load_dataset(run.dataset(Level::kAnswer));
  for (const auto& e : answers.examples()) EXPECT_FALSE(e.step_starts.has_value());

  const Dataset pairs = load_dataset(run.pairs(Level::kStep));
  ASSERT_TRUE(pairs.is_paired());
  std::map<int, int> pos;
  std::map<int, int> neg;
  std::map<int, int> paired;
  for (const auto& e : steps.examples()) (e.all_correct() ? pos : neg)[e.prompt[0]]++;
  for (const auto& p : pairs.pairs()) {
    paired[p.prompt[0]]++;
    EXPECT_TRUE(p.chosen.all_correct());
    EXPECT_FALSE(p.rejected.all_correct());
  }
  for (const auto& [x, k] : paired) EXPECT_LE(k, std::min(pos[x], neg[x]));
  EXPECT_TRUE(fs::exists(run.manifest()));
  EXPECT_EQ(parse_config(slurp(run.config())).world.seed, c.world.seed);
}

TEST(Gen, SameConfigSameDigests) {
  Scratch s("digests");
  std::ostringstream log;
  const ExperimentConfig c = small_config(s / "run");
  cmd_gen(c, log);
  const std::string first = slurp(s / "run" / "manifest.json");
  cmd_gen(c, log);
  EXPECT_EQ(slurp(s / "run" / "manifest.json"), first);
}

TEST(Train, SftThenPipaMirrorsTwoStageRecipe) {
  Scratch s("two_stage");
  std::ostringstream log;
  ExperimentConfig sft = small_config(s / "run");
  sft.train.loss.kind = LossKind::kSft;
  sft.train.lr = 0.1;
  cmd_gen(sft, log);
  cmd_train(sft, log);
  fs::copy_file(s / "run" / "model.txt", s / "sft_model.txt");
  const ModelBundle stage1 = load_bundle(s / "sft_model.txt");

  ExperimentConfig pipa = small_config(s / "run");
  pipa.prior.source = PriorSource::kCheckpoint;
  pipa.prior.path = (s / "sft_model.txt").string();
  cmd_train(pipa, log);
  const ModelBundle stage2 = load_bundle(s / "run" / "model.txt");
  const std::vector<double> a(stage2.prior.logits().begin(), stage2.prior.logits().end());
  const std::vector<double> b(stage1.policy.logits().begin(), stage1.policy.logits().end());
  EXPECT_EQ(a, b);
  EXPECT_NE(std::vector<double>(stage2.policy.logits().begin(), stage2.policy.logits().end()), b);
}

TEST(Train, GridWritesEveryLearningRate) {
  Scratch s("grid");
  std::ostringstream log;
  ExperimentConfig c = small_config(s / "run");
  c.train.grid = {0.01, 0.05};
  cmd_gen(c, log);
  cmd_train(c, log);
  const std::string grid = slurp(s / "run" / "grid.csv");
  EXPECT_EQ(count_substr(grid, "\n"), 3);
  EXPECT_NE(slurp(s / "run" / "train_summary.txt").find("lr "), std::string::npos);
}

TEST(Train, RejectsIncompatibleOrMissingData) {
  Scratch s("reject");
  std::ostringstream log;
  ExperimentConfig c = small_config(s / "run");
  EXPECT_THROW(cmd_train(c, log), ResourceError);
  c.data.pairing = false;
  c.train.loss.kind = LossKind::kDpo;
  EXPECT_THROW(cmd_train(c, log), InvalidInput);
}

TEST(Verify, DefaultTogglesRunBothIdentityChecks) {
  Scratch s("verify_default");
  ExperimentConfig c;
  c.output_dir = (s / "run").string();
  std::ostringstream log;
  EXPECT_TRUE(cmd_verify(c, log));
  const std::string csv = slurp(s / "run" / "verify.csv");
  EXPECT_EQ(count_substr(csv, "\n"), 3);
  EXPECT_NE(csv.find("dpo-equivalence,1000,"), std::string::npos);
  EXPECT_NE(csv.find("kto-equivalence,1000,"), std::string::npos);
}

TEST(Verify, FailingCheckAndMissingArtifacts) {
  Scratch s("verify_fail");
  std::ostringstream log;
  ExperimentConfig c = small_config(s / "run");
  c.verify.checks = {"recovery"};
  EXPECT_THROW(cmd_verify(c, log), ResourceError);
  cmd_gen(c, log);
  cmd_train(c, log);
  c.verify.tv_tolerance = 0.0;
  EXPECT_FALSE(cmd_verify(c, log));
  EXPECT_NE(slurp(s / "run" / "verify.txt").find("FAIL"), std::string::npos);
}

TEST(Report, EmptyCsvGivesAxesOnly) {
  Scratch s("report_empty");
  fs::create_directories(s / "run");
  write_text(s / "run" / "metrics.csv", std::string(kMetricsHeader) + "\n");
  std::ostringstream log;
  cmd_report(s / "run", {s / "run"}, log);
  expect_well_formed_svg(s / "run" / "value_trajectory.svg");
  expect_well_formed_svg(s / "run" / "reward_trajectory.svg");
  const std::string svg = slurp(s / "run" / "value_trajectory.svg");
  EXPECT_EQ(count_substr(svg, "<polyline"), 0);
  EXPECT_EQ(count_substr(svg, "<line x1"), 3);
  EXPECT_NE(slurp(s / "run" / "report.txt").find("steps=0"), std::string::npos);
}

TEST(Report, TwoRunsOverlay) {
  Scratch s("report_two");
  std::ostringstream log;
  ExperimentConfig m = small_config(s / "pipa_m");
  cmd_gen(m, log);
  cmd_train(m, log);
  ExperimentConfig n = small_config(s / "pipa_n");
  n.train.loss.kind = LossKind::kPipaN;
  cmd_gen(n, log);
  cmd_train(n, log);
  cmd_report(s / "cmp", {s / "pipa_m", s / "pipa_n"}, log);
  expect_well_formed_svg(s / "cmp" / "value_trajectory.svg");
  expect_well_formed_svg(s / "cmp" / "reward_trajectory.svg");
  EXPECT_EQ(count_substr(slurp(s / "cmp" / "value_trajectory.svg"), "<polyline"), 2);
  EXPECT_EQ(count_substr(slurp(s / "cmp" / "reward_trajectory.svg"), "<polyline"), 4);
  const std::string text = slurp(s / "cmp" / "report.txt");
  EXPECT_NE(text.find("run pipa_m"), std::string::npos);
  EXPECT_NE(text.find("run pipa_n"), std::string::npos);
}

TEST(Report, MalformedCsvIsRejected) {
  EXPECT_THROW(metrics_from_csv(""), InvalidInput);
  EXPECT_THROW(metrics_from_csv("a,b\n"), InvalidInput);
  EXPECT_THROW(metrics_from_csv(std::string(kMetricsHeader) + "\n1,2,3\n"), InvalidInput);
  EXPECT_THROW(metrics_from_csv(std::string(kMetricsHeader) + "\n1,x,3,4,5,6\n"), InvalidInput);
  const MetricsLog m = metrics_from_csv(std::string(kMetricsHeader) + "\n0,1.5,nan,0,0,0\n");
  ASSERT_EQ(m.rows().size(), 1u);
  EXPECT_TRUE(std::isnan(m.rows()[0].value_geo_mean));
}

TEST(Svg, EscapesLabels) {
  const std::string svg = line_plot_svg("a<b & c", "x", "y", {Series{"r\"1\"", {{0, 1}, {1, 2}}}});
  boost::property_tree::ptree tree;
  std::istringstream in(svg);
  EXPECT_NO_THROW(boost::property_tree::read_xml(in, tree));
  EXPECT_NE(svg.find("a&lt;b &amp; c"), std::string::npos);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PIPA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  Scratch s("cli");
  const ExperimentConfig c = small_config(s / "run");
  write_text(s / "ok.cfg", config_to_text(c));
  write_text(s / "bad.cfg", "train.kind = nope\n");
  ExperimentConfig strict = c;
  strict.verify.checks = {"recovery"};
  strict.verify.tv_tolerance = 0.0;
  write_text(s / "strict.cfg", config_to_text(strict));
  ExperimentConfig blowup = c;
  blowup.train.optimizer = OptimizerKind::kSgd;
  blowup.train.lr = 1e300;
  write_text(s / "blowup.cfg", config_to_text(blowup));
  const std::string ok = "--config " + (s / "ok.cfg").string();

  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("gen"), 2);
  EXPECT_EQ(run_cli("gen --config " + (s / "bad.cfg").string()), 2);
  EXPECT_EQ(run_cli("gen --config /nonexistent.cfg"), 2);
  EXPECT_EQ(run_cli("train " + ok + " --only recovery"), 2);
  EXPECT_EQ(run_cli("gen " + ok), 0);
  EXPECT_EQ(run_cli("train " + ok), 0);
  EXPECT_EQ(run_cli("verify " + ok), 0);
  EXPECT_EQ(run_cli("verify " + ok + " --only dpo-equivalence"), 0);
  EXPECT_EQ(run_cli("verify " + ok + " --only no-such-check"), 2);
  EXPECT_EQ(run_cli("verify --config " + (s / "strict.cfg").string()), 1);
  EXPECT_EQ(run_cli("report " + ok), 0);
  EXPECT_EQ(run_cli("train --config " + (s / "blowup.cfg").string()), 3);
  EXPECT_EQ(run_cli("gen " + ok + " --out " + (s / "other").string() + " --seed-override 9"), 0);
  EXPECT_NE(slurp(s / "other" / "config.cfg").find("world.seed = 9"), std::string::npos);
}

}  // namespace
}  // namespace pipa
