#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pipa/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct Options {
  std::string config;
  std::string out;
  std::string only;
  std::optional<std::uint64_t> seed_override;
  std::vector<std::string> runs;
};

pipa::ExperimentConfig resolve_config(const Options& o, bool allow_only) {
  if (o.config.empty()) throw pipa::InvalidInput("--config is required");
  pipa::ExperimentConfig c = pipa::parse_config(pipa::read_text(o.config));
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed_override) c.override_seeds(*o.seed_override);
  if (!o.only.empty()) {
    if (!allow_only) throw pipa::InvalidInput("--only applies to the verify command");
    c.verify.checks = pipa::detail::split_list(o.only);
  }
  c.validate();
  return c;
}

int run(const std::string& command, const Options& o) {
  if (command == "gen") {
    pipa::cmd_gen(resolve_config(o, false), std::cout);
    return kOk;
  }
  if (command == "train") {
    pipa::cmd_train(resolve_config(o, false), std::cout);
    return kOk;
  }
  if (command == "verify") return pipa::cmd_verify(resolve_config(o, true), std::cout) ? kOk : kCheckFailed;

  if (!o.only.empty()) throw pipa::InvalidInput("--only applies to the verify command");
  std::filesystem::path out = o.out;
  if (out.empty()) {
    if (o.config.empty()) throw pipa::InvalidInput("report needs --out or --config");
    out = pipa::parse_config(pipa::read_text(o.config)).output_dir;
  }
  std::vector<std::filesystem::path> runs(o.runs.begin(), o.runs.end());
  if (runs.empty()) runs.push_back(out);
  pipa::cmd_report(out, runs, std::cout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prior-informed preference alignment laboratory on tabular worlds"};
  app.require_subcommand(1, 1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config file");
    sub->add_option("--out", o.out, "run directory (overrides output.dir)");
    sub->add_option("--only", o.only, "comma-separated verify checks to run");
    sub->add_option("--seed-override", o.seed_override, "replace every seed in the config");
  };
  add_common(app.add_subcommand("gen", "sample a world and its datasets"));
  add_common(app.add_subcommand("train", "fit the prior and train the configured loss"));
  add_common(app.add_subcommand("verify", "run verification checks"));
  CLI::App* report = app.add_subcommand("report", "plot metrics of one or more runs");
  add_common(report);
  report->add_option("runs", o.runs, "run directories to overlay (default: the --out directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const pipa::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const pipa::DomainError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const pipa::InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const pipa::ResourceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
}
