#pragma once

// The gen / train / verify / report commands over a run directory.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "pipa/config.hpp"
#include "pipa/error.hpp"
#include "pipa/io.hpp"
#include "pipa/svg.hpp"
#include "pipa/trainer.hpp"
#include "pipa/verify.hpp"

namespace pipa {

namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw ResourceError("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

/// File names inside a run directory.
struct RunLayout {
  fs::path dir;

  fs::path config() const { return dir / "config.cfg"; }
  fs::path world() const { return dir / "world.txt"; }
  fs::path dataset(Level l) const { return dir / ("dataset_" + to_string(l) + ".jsonl"); }
  fs::path pairs(Level l) const { return dir / ("pairs_" + to_string(l) + ".jsonl"); }
  fs::path model() const { return dir / "model.txt"; }
  fs::path metrics() const { return dir / "metrics.csv"; }
  fs::path grid() const { return dir / "grid.csv"; }
  fs::path train_summary() const { return dir / "train_summary.txt"; }
  fs::path verify_csv() const { return dir / "verify.csv"; }
  fs::path verify_summary() const { return dir / "verify.txt"; }
  fs::path value_plot() const { return dir / "value_trajectory.svg"; }
  fs::path reward_plot() const { return dir / "reward_trajectory.svg"; }
  fs::path report() const { return dir / "report.txt"; }
  fs::path manifest() const { return dir / "manifest.json"; }
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ResourceError("cannot create output directory '" + dir.string() + "'");
}

inline std::string require_artifact(const fs::path& path) {
  if (!fs::exists(path)) throw ResourceError("missing artifact '" + path.string() + "'");
  return read_text(path);
}

/// Records the SHA-256 of each named file (relative to the run directory).
inline void update_manifest(const RunLayout& run, const std::vector<fs::path>& files) {
  nlohmann::json m = nlohmann::json::object();
  if (fs::exists(run.manifest())) {
    try {
      m = nlohmann::json::parse(read_text(run.manifest()));
    } catch (const nlohmann::json::exception&) {
      m = nlohmann::json::object();
    }
  }
  for (const auto& f : files) m["files"][f.filename().string()] = sha256_hex(read_text(f));
  write_text(run.manifest(), m.dump(2) + '\n');
}

inline ExperimentConfig load_config(const fs::path& path) {
  ExperimentConfig c = parse_config(read_text(path));
  c.validate();
  return c;
}

inline World make_config_world(const ExperimentConfig& c) {
  return make_world(c.world.seed, c.world.prompts, c.world.vocab, c.world.len, c.world.options);
}

// ------------------------------------------------------------------- gen

inline void cmd_gen(const ExperimentConfig& c, std::ostream& log) {
  c.validate();
  const RunLayout run{c.output_dir};
  const World w = make_config_world(c);
  ensure_dir(run.dir);
  std::vector<fs::path> written{run.config(), run.world()};
  write_text(run.config(), config_to_text(c));
  save_world(run.world(), w);
  for (Level level : c.generated_levels()) {
    const Dataset d = sample_dataset(w, c.data.n, level, c.data.seed);
    save_dataset(run.dataset(level), d);
    written.push_back(run.dataset(level));
    log << "gen: " << d.size() << " " << to_string(level) << "-level records -> " << run.dataset(level).string()
        << '\n';
    if (c.data.pairing) {
      const Dataset p = pair_by_problem(d, c.data.seed);
      save_dataset(run.pairs(level), p);
      written.push_back(run.pairs(level));
      log << "gen: " << p.size() << " pairs -> " << run.pairs(level).string() << '\n';
    }
  }
  update_manifest(run, written);
}

// ----------------------------------------------------------------- train

inline TabularPolicy config_prior(const ExperimentConfig& c, const World* w, const Dataset& data) {
  switch (c.prior.source) {
    case PriorSource::kExact:
      return exact_prior(*w, c.train.loss.kind, data.level());
    case PriorSource::kFitted:
      return fit_sft(TabularPolicy(c.model_shape()), data, c.prior_selector(), c.prior.sft_epochs, c.prior.sft_lr);
    case PriorSource::kCheckpoint: {
      const ModelBundle b = bundle_from_text(require_artifact(c.prior.path));
      require(b.shape() == c.model_shape(), "prior checkpoint shape does not match the config");
      return b.policy.frozen_copy();
    }
  }
  throw InvalidInput("unknown prior source");
}

inline TabularPolicy config_init(const ExperimentConfig& c, const TabularPolicy& prior) {
  switch (c.model.init) {
    case InitMode::kPrior:
      return prior.trainable_copy();
    case InitMode::kUniform:
      return TabularPolicy(c.model_shape());
    case InitMode::kRandom: {
      TabularPolicy p(c.model_shape());
      std::mt19937_64 rng(c.model.init_seed);
      std::normal_distribution<double> nd(0.0, c.model.init_scale);
      for (double& v : p.mutable_logits()) v = nd(rng);
      return p;
    }
  }
  throw InvalidInput("unknown init mode");
}

inline Dataset load_training_data(const ExperimentConfig& c, const RunLayout& run) {
  const fs::path path = is_paired_loss(c.train.loss.kind) ? run.pairs(c.train_level) : run.dataset(c.train_level);
  return dataset_from_jsonl(require_artifact(path));
}

inline void cmd_train(const ExperimentConfig& c, std::ostream& log) {
  c.validate();
  const RunLayout run{c.output_dir};
  const Dataset data = load_training_data(c, run);
  check_compatible(data, c.train.loss);
  std::optional<World> world;
  if (c.prior.source == PriorSource::kExact) world = world_from_text(require_artifact(run.world()));
  const TabularPolicy prior = config_prior(c, world ? &*world : nullptr, data);
  const TabularPolicy init = config_init(c, prior);
  auto factory = [&] { return ModelBundle::make(init, prior); };

  TrainResult result;
  double chosen_lr = c.train.lr;
  std::vector<fs::path> written{run.model(), run.metrics(), run.train_summary()};
  if (c.train.grid.empty()) {
    result = train(factory(), data, c.train);
  } else {
    GridResult g = grid_search(factory, data, c.train);
    std::ostringstream csv;
    csv.precision(17);
    csv << "lr,final_loss\n";
    for (const auto& r : g.runs) csv << r.lr << ',' << r.final_loss << '\n';
    write_text(run.grid(), csv.str());
    written.push_back(run.grid());
    chosen_lr = g.best_run().lr;
    result = std::move(g.runs[g.best].result);
  }
  save_bundle(run.model(), result.bundle);
  write_text(run.metrics(), result.log.to_csv());

  std::ostringstream summary;
  summary.precision(6);
  const int last = result.log.epochs() - 1;
  summary << "kind " << to_string(c.train.loss.kind) << '\n'
          << "level " << to_string(data.level()) << '\n'
          << "records " << data.size() << '\n'
          << "steps " << result.log.rows().size() << '\n'
          << "lr " << chosen_lr << '\n'
          << "final_epoch_loss " << result.log.epoch_mean(last, &MetricsRow::loss) << '\n'
          << "final_epoch_value_geo_mean " << result.log.epoch_mean(last, &MetricsRow::value_geo_mean) << '\n'
          << "final_epoch_reward_pos " << result.log.epoch_mean(last, &MetricsRow::reward_pos) << '\n'
          << "final_epoch_reward_neg " << result.log.epoch_mean(last, &MetricsRow::reward_neg) << '\n'
          << "final_epoch_clip_rate " << result.log.epoch_mean(last, &MetricsRow::clip_rate) << '\n';
  write_text(run.train_summary(), summary.str());
  update_manifest(run, written);
  log << "train: " << to_string(c.train.loss.kind) << " on " << data.size() << " records, "
      << result.log.rows().size() << " steps -> " << run.model().string() << '\n';
}

// ---------------------------------------------------------------- verify

inline RecoveryOptions recovery_options(const ExperimentConfig& c) {
  require(uses_value_model(c.train.loss.kind), "this check needs train.kind = pipa-m or pipa-n");
  require(c.prior.source != PriorSource::kCheckpoint, "this check needs prior.source = exact or fitted");
  RecoveryOptions opt;
  opt.kind = c.train.loss.kind;
  opt.level = c.train_level;
  opt.prior = c.prior.source == PriorSource::kExact ? PriorMode::kExact : PriorMode::kFitted;
  opt.data_seed = c.data.seed;
  opt.train = c.train;
  opt.train.grid.clear();
  opt.sft_epochs = c.prior.sft_epochs;
  opt.sft_lr = c.prior.sft_lr;
  opt.tolerance = c.verify.tv_tolerance;
  return opt;
}

inline VerificationReport run_check(const std::string& name, const ExperimentConfig& c, const RunLayout& run) {
  if (name == "dpo-equivalence") return check_dpo_equivalence(c.verify.seed, c.verify.trials);
  if (name == "kto-equivalence") return check_kto_equivalence(c.verify.seed, c.verify.trials);

  const World w = world_from_text(require_artifact(run.world()));
  if (name == "step-vs-answer") {
    AblationOptions opt;
    opt.n = c.verify.ablation_n;
    opt.data_seed = c.verify.seed;
    opt.train = c.train;
    opt.train.grid.clear();
    return step_vs_answer_median(w, opt, c.verify.ablation_seeds);
  }
  if (name == "threshold-sweep") {
    ThresholdSweepOptions opt;
    opt.thresholds = c.verify.thresholds;
    opt.n = c.verify.ablation_n;
    opt.data_seed = c.verify.seed;
    opt.kind = uses_value_model(c.train.loss.kind) ? c.train.loss.kind : LossKind::kPipaM;
    opt.train = c.train;
    opt.train.grid.clear();
    return threshold_sweep(w, opt);
  }

  const Dataset data = load_training_data(c, run);
  if (name == "value-ablation") return value_ablation(w, data, recovery_options(c));

  const ModelBundle b = bundle_from_text(require_artifact(run.model()));
  require(b.shape() == w.shape() || name == "clip-rate", "recovery needs a model over the world's full history");
  if (name == "recovery") {
    return assess_recovery(w, data, b, c.train.loss.kind, c.train.loss.epsilon, c.verify.tv_tolerance).report;
  }
  if (name == "clip-rate") {
    require(c.train.loss.kind == LossKind::kPipaM, "clip-rate applies to pipa-m runs");
    const Dataset flat = as_unpaired(data);
    VerificationReport rep;
    rep.name = "clip-rate";
    rep.trials = flat.size();
    rep.max_discrepancy = clip_rate(b, flat.examples(), c.train.loss.epsilon);
    rep.tolerance = c.verify.clip_tolerance;
    rep.settle();
    return rep;
  }
  throw InvalidInput("unknown verify check '" + name + "'");
}

/// Runs the configured checks; true when every check passes.
inline bool cmd_verify(const ExperimentConfig& c, std::ostream& log) {
  c.validate();
  const RunLayout run{c.output_dir};
  ensure_dir(run.dir);
  std::vector<VerificationReport> reports;
  for (const auto& name : c.verify.checks) reports.push_back(run_check(name, c, run));
  std::string csv = VerificationReport::csv_header() + '\n';
  std::string text;
  bool ok = true;
  for (const auto& r : reports) {
    csv += r.csv_row() + '\n';
    text += r.summary() + '\n';
    ok = ok && r.passed;
  }
  write_text(run.verify_csv(), csv);
  write_text(run.verify_summary(), text);
  update_manifest(run, {run.verify_csv(), run.verify_summary()});
  log << text;
  return ok;
}

// ---------------------------------------------------------------- report

inline MetricsLog metrics_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("metrics CSV is empty (no header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw InvalidInput("metrics CSV header mismatch: '" + line + "'");
  MetricsLog log;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw InvalidInput("metrics CSV line " + std::to_string(lineno) + ": expected 6 columns");
    std::vector<double> v;
    for (const auto& s : cells) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(s, &used);
      } catch (const std::exception&) {
        throw InvalidInput("metrics CSV line " + std::to_string(lineno) + ": bad number '" + s + "'");
      }
      if (used != s.size()) throw InvalidInput("metrics CSV line " + std::to_string(lineno) + ": bad number '" + s + "'");
      v.push_back(x);
    }
    log.append(MetricsRow{static_cast<long>(v[0]), 0, v[1], v[2], v[3], v[4], v[5]});
  }
  return log;
}

/// Plots the value and reward trajectories of one or more runs into `out`.
inline void cmd_report(const fs::path& out, const std::vector<fs::path>& runs, std::ostream& log) {
  require(!runs.empty(), "report needs at least one run directory");
  std::vector<std::pair<std::string, MetricsLog>> logs;
  for (const auto& dir : runs) {
    std::string name = dir.filename().string();
    if (name.empty()) name = dir.parent_path().filename().string();
    logs.emplace_back(name, metrics_from_csv(require_artifact(RunLayout{dir}.metrics())));
  }
  std::vector<Series> value;
  std::vector<Series> reward;
  std::ostringstream text;
  for (const auto& [name, m] : logs) {
    Series v{name, {}};
    Series rp{name + " positive", {}};
    Series rn{name + " negative", {}};
    for (const auto& r : m.rows()) {
      const auto x = static_cast<double>(r.step);
      v.points.emplace_back(x, r.value_geo_mean);
      rp.points.emplace_back(x, r.reward_pos);
      rn.points.emplace_back(x, r.reward_neg);
    }
    value.push_back(std::move(v));
    reward.push_back(std::move(rp));
    reward.push_back(std::move(rn));
    text << "run " << name << ": steps=" << m.rows().size();
    if (!m.empty()) {
      const auto& last = m.rows().back();
      char buf[256];
      std::snprintf(buf, sizeof buf, " loss=%.6g value_geo_mean=%.6g reward_pos=%.6g reward_neg=%.6g clip_rate=%.6g",
                    last.loss, last.value_geo_mean, last.reward_pos, last.reward_neg, last.clip_rate);
      text << buf;
    }
    text << '\n';
  }
  const RunLayout dst{out};
  ensure_dir(dst.dir);
  write_text(dst.value_plot(), line_plot_svg("Value likelihood", "step", "geometric mean p(c_t | x, y<t)", value));
  write_text(dst.reward_plot(), line_plot_svg("Implicit reward", "step", "log f(y|x) - log prior(y|x)", reward));
  write_text(dst.report(), text.str());
  log << text.str();
}

}  // namespace pipa
