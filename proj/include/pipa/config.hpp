#pragma once

// Experiment configuration as flat `dotted.key = value` text.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/losses.hpp"
#include "pipa/models.hpp"
#include "pipa/optim.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/synthworld.hpp"
#include "pipa/trainer.hpp"

namespace pipa {

inline std::string to_string(SftSelector s) {
  switch (s) {
    case SftSelector::kPositive: return "positive";
    case SftSelector::kAll: return "all";
    case SftSelector::kNegative: return "negative";
  }
  return "?";
}

/// Key/value pairs in file order; keys unique.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text) {
    FlatConfig out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string body = trim(line);
      if (body.empty() || body[0] == '#') continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw InvalidInput("config line " + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(body.substr(0, eq));
      if (key.empty() || key.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_.") != std::string::npos) {
        throw InvalidInput("config line " + std::to_string(lineno) + ": bad key '" + key + "'");
      }
      if (out.values_.count(key)) throw InvalidInput("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      out.set(key, trim(body.substr(eq + 1)));
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }

  const std::vector<std::string>& keys() const { return order_; }
  const std::string& at(const std::string& key) const { return values_.at(key); }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string to_text() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + '\n';
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

enum class InitMode { kPrior, kUniform, kRandom };
enum class PriorSource { kExact, kFitted, kCheckpoint };

struct ExperimentConfig {
  struct WorldSpec {
    std::uint64_t seed = 1;
    int prompts = 4;
    int vocab = 4;
    int len = 2;
    WorldOptions options;
  } world;

  struct DataSpec {
    std::size_t n = 50000;
    /// "answer", "step" or "both".
    std::string levels = "step";
    bool pairing = false;
    std::uint64_t seed = 1;
  } data;

  struct ModelSpec {
    int window = 1;
    InitMode init = InitMode::kPrior;
    std::uint64_t init_seed = 1;
    double init_scale = 0.5;
  } model;

  struct PriorSpec {
    PriorSource source = PriorSource::kExact;
    /// Unset: all answers for PIPA-M, negatives for PIPA-N, positives otherwise.
    std::optional<SftSelector> selector;
    int sft_epochs = 500;
    double sft_lr = 0.1;
    std::string path;
  } prior;

  Level train_level = Level::kStep;
  TrainConfig train;

  struct VerifySpec {
    std::vector<std::string> checks{"dpo-equivalence", "kto-equivalence"};
    std::uint64_t seed = 1;
    std::size_t trials = 1000;
    double tv_tolerance = 0.05;
    double clip_tolerance = 0.05;
    std::size_t ablation_n = 4000;
    int ablation_seeds = 5;
    std::vector<double> thresholds{-0.5, 0.0, 0.5, 0.9};
  } verify;

  std::string output_dir = "run";

  ModelShape model_shape() const { return ModelShape{world.vocab, world.len, model.window, world.prompts}; }

  std::vector<Level> generated_levels() const {
    if (data.levels == "both") return {Level::kAnswer, Level::kStep};
    return {parse_level(data.levels)};
  }

  SftSelector prior_selector() const {
    if (prior.selector) return *prior.selector;
    if (train.loss.kind == LossKind::kPipaM) return SftSelector::kAll;
    if (train.loss.kind == LossKind::kPipaN) return SftSelector::kNegative;
    return SftSelector::kPositive;
  }

  /// Replaces every seed with one value.
  void override_seeds(std::uint64_t seed) {
    world.seed = data.seed = model.init_seed = train.seed = verify.seed = seed;
  }

  void validate() const;
};

namespace detail {

inline std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double real_value(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InvalidInput("config '" + key + "': expected a number, got '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) throw InvalidInput("config '" + key + "': expected a finite number, got '" + s + "'");
  return v;
}

inline long long int_value(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw InvalidInput("config '" + key + "': expected an integer, got '" + s + "'");
  }
  if (used != s.size()) throw InvalidInput("config '" + key + "': expected an integer, got '" + s + "'");
  return v;
}

inline std::uint64_t seed_value(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw InvalidInput("config '" + key + "': seed must be a nonnegative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw InvalidInput("config '" + key + "': seed out of range");
  }
}

inline bool bool_value(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw InvalidInput("config '" + key + "': expected true|false, got '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = FlatConfig::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline Field real_field(std::string key, double& ref) {
  return {key, [&ref] { return real_text(ref); }, [&ref, key](const std::string& s) { ref = real_value(key, s); }};
}

template <class Int>
Field int_field(std::string key, Int& ref) {
  return {key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& s) {
            const long long v = int_value(key, s);
            if (std::is_unsigned_v<Int> && v < 0) throw InvalidInput("config '" + key + "' must be nonnegative");
            ref = static_cast<Int>(v);
          }};
}

inline Field seed_field(std::string key, std::uint64_t& ref) {
  return {key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& s) { ref = seed_value(key, s); }};
}

inline Field bool_field(std::string key, bool& ref) {
  return {key, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& s) { ref = bool_value(key, s); }};
}

inline Field real_list_field(std::string key, std::vector<double>& ref) {
  return {key,
          [&ref] {
            std::vector<std::string> parts;
            for (double v : ref) parts.push_back(real_text(v));
            return join(parts);
          },
          [&ref, key](const std::string& s) {
            ref.clear();
            for (const auto& item : split_list(s)) ref.push_back(real_value(key, item));
          }};
}

template <class Enum>
Field enum_field(std::string key, Enum& ref, std::function<std::string(Enum)> show,
                 std::function<Enum(const std::string&)> read) {
  return {key, [&ref, show] { return show(ref); }, [&ref, read](const std::string& s) { ref = read(s); }};
}

inline std::string init_text(InitMode m) {
  return m == InitMode::kPrior ? "prior" : m == InitMode::kUniform ? "uniform" : "random";
}
inline InitMode parse_init(const std::string& s) {
  if (s == "prior") return InitMode::kPrior;
  if (s == "uniform") return InitMode::kUniform;
  if (s == "random") return InitMode::kRandom;
  throw InvalidInput("unknown model.init '" + s + "' (expected prior|uniform|random)");
}

inline std::string source_text(PriorSource p) {
  return p == PriorSource::kExact ? "exact" : p == PriorSource::kFitted ? "fitted" : "checkpoint";
}
inline PriorSource parse_source(const std::string& s) {
  if (s == "exact") return PriorSource::kExact;
  if (s == "fitted") return PriorSource::kFitted;
  if (s == "checkpoint") return PriorSource::kCheckpoint;
  throw InvalidInput("unknown prior.source '" + s + "' (expected exact|fitted|checkpoint)");
}

/// Every key of the file format bound to one config instance.
inline std::vector<Field> fields(ExperimentConfig& c) {
  auto& wo = c.world.options;
  auto& tc = c.train;
  std::vector<Field> f{
      seed_field("world.seed", c.world.seed),
      int_field("world.prompts", c.world.prompts),
      int_field("world.vocab", c.world.vocab),
      int_field("world.len", c.world.len),
      real_field("world.alpha", wo.alpha),
      real_field("world.class_prior_lo", wo.class_prior_lo),
      real_field("world.class_prior_hi", wo.class_prior_hi),
      {"world.fault",
       [&wo] {
         if (!wo.fault) return std::string("sampled");
         std::vector<std::string> parts;
         for (double v : *wo.fault) parts.push_back(real_text(v));
         return join(parts);
       },
       [&wo](const std::string& s) {
         if (s == "sampled") {
           wo.fault.reset();
           return;
         }
         std::vector<double> v;
         for (const auto& item : split_list(s)) v.push_back(real_value("world.fault", item));
         wo.fault = v;
       }},
      real_field("world.fault_alpha", wo.fault_alpha),
      int_field("data.n", c.data.n),
      {"data.levels", [&c] { return c.data.levels; }, [&c](const std::string& s) { c.data.levels = s; }},
      bool_field("data.pairing", c.data.pairing),
      seed_field("data.seed", c.data.seed),
      int_field("model.window", c.model.window),
      enum_field<InitMode>("model.init", c.model.init, init_text, parse_init),
      seed_field("model.init_seed", c.model.init_seed),
      real_field("model.init_scale", c.model.init_scale),
      enum_field<PriorSource>("prior.source", c.prior.source, source_text, parse_source),
      {"prior.selector", [&c] { return c.prior.selector ? to_string(*c.prior.selector) : std::string("auto"); },
       [&c](const std::string& s) {
         if (s == "auto") {
           c.prior.selector.reset();
         } else {
           c.prior.selector = parse_selector(s);
         }
       }},
      int_field("prior.sft_epochs", c.prior.sft_epochs),
      real_field("prior.sft_lr", c.prior.sft_lr),
      {"prior.path", [&c] { return c.prior.path; }, [&c](const std::string& s) { c.prior.path = s; }},
      enum_field<Level>("train.level", c.train_level, [](Level l) { return to_string(l); }, parse_level),
      enum_field<LossKind>("train.kind", tc.loss.kind, [](LossKind k) { return to_string(k); }, parse_loss_kind),
      real_field("train.beta", tc.loss.beta),
      real_field("train.epsilon", tc.loss.epsilon),
      real_field("train.sft_coeff", tc.loss.sft_coeff),
      enum_field<ZMode>("train.z_mode", tc.loss.z_mode, [](ZMode m) { return to_string(m); }, parse_z_mode),
      {"train.z0", [&tc] { return tc.loss.z0 ? real_text(*tc.loss.z0) : std::string("none"); },
       [&tc](const std::string& s) {
         if (s == "none") {
           tc.loss.z0.reset();
         } else {
           tc.loss.z0 = real_value("train.z0", s);
         }
       }},
      enum_field<OptimizerKind>("train.optimizer", tc.optimizer, [](OptimizerKind k) { return to_string(k); },
                                parse_optimizer),
      real_field("train.adam.beta1", tc.adam.beta1),
      real_field("train.adam.beta2", tc.adam.beta2),
      real_field("train.adam.eps", tc.adam.eps),
      real_field("train.lr", tc.lr),
      real_list_field("train.grid", tc.grid),
      enum_field<LrSchedule>("train.schedule", tc.schedule, [](LrSchedule s) { return to_string(s); },
                             parse_schedule),
      int_field("train.batch_size", tc.batch_size),
      int_field("train.epochs", tc.epochs),
      seed_field("train.seed", tc.seed),
      int_field("train.probe_size", tc.probe_size),
      bool_field("train.freeze_value", tc.freeze_value),
      {"verify.checks", [&c] { return join(c.verify.checks); },
       [&c](const std::string& s) { c.verify.checks = split_list(s); }},
      seed_field("verify.seed", c.verify.seed),
      int_field("verify.trials", c.verify.trials),
      real_field("verify.tv_tolerance", c.verify.tv_tolerance),
      real_field("verify.clip_tolerance", c.verify.clip_tolerance),
      int_field("verify.ablation_n", c.verify.ablation_n),
      int_field("verify.ablation_seeds", c.verify.ablation_seeds),
      real_list_field("verify.thresholds", c.verify.thresholds),
      {"output.dir", [&c] { return c.output_dir; }, [&c](const std::string& s) { c.output_dir = s; }},
  };
  return f;
}

}  // namespace detail

inline const std::vector<std::string>& verify_check_names() {
  static const std::vector<std::string> names{"dpo-equivalence", "kto-equivalence", "recovery",       "clip-rate",
                                              "value-ablation",  "step-vs-answer",  "threshold-sweep"};
  return names;
}

inline void ExperimentConfig::validate() const {
  require(world.prompts >= 1 && world.vocab >= 2 && world.len >= 1, "world needs prompts >= 1, vocab >= 2, len >= 1");
  require(world.options.alpha > 0.0 && world.options.fault_alpha > 0.0, "world Dirichlet concentrations must be positive");
  require(world.options.class_prior_lo > 0.0 && world.options.class_prior_lo <= world.options.class_prior_hi &&
              world.options.class_prior_hi < 1.0,
          "world class prior range must satisfy 0 < lo <= hi < 1");
  if (world.options.fault) {
    require(static_cast<int>(world.options.fault->size()) == world.len, "world.fault needs one entry per position");
    for (double v : *world.options.fault) require(v >= 0.0, "world.fault entries must be nonnegative");
  }
  require(data.n >= 1, "data.n must be at least 1");
  require(data.levels == "answer" || data.levels == "step" || data.levels == "both",
          "data.levels must be answer|step|both");
  require(model.window >= 0 && model.window <= world.len - 1, "model.window must lie in [0, world.len - 1]");
  require(model.init_scale >= 0.0, "model.init_scale must be nonnegative");
  require(prior.sft_epochs >= 0 && prior.sft_lr >= 0.0, "prior SFT settings must be nonnegative");
  require(prior.source != PriorSource::kCheckpoint || !prior.path.empty(), "prior.source = checkpoint needs prior.path");
  require(prior.source != PriorSource::kExact || model.window == world.len - 1,
          "prior.source = exact needs model.window = world.len - 1");
  bool level_generated = false;
  for (Level l : generated_levels()) level_generated = level_generated || l == train_level;
  require(level_generated, "train.level '" + to_string(train_level) + "' is not produced by data.levels");
  require(!is_paired_loss(train.loss.kind) || data.pairing, "paired loss kinds need data.pairing = true");
  train.validate();
  for (const auto& name : verify.checks) {
    bool known = false;
    for (const auto& k : verify_check_names()) known = known || k == name;
    require(known, "unknown verify check '" + name + "'");
  }
  require(verify.trials >= 1, "verify.trials must be at least 1");
  require(verify.ablation_seeds >= 1 && verify.ablation_n >= 2, "verify ablation settings too small");
  require(!verify.thresholds.empty(), "verify.thresholds must not be empty");
  require(!output_dir.empty(), "output.dir must not be empty");
  ModelShape s = model_shape();
  s.validate();
}

inline ExperimentConfig config_from_flat(const FlatConfig& flat) {
  ExperimentConfig c;
  auto fs = detail::fields(c);
  std::set<std::string> known;
  for (const auto& f : fs) known.insert(f.key);
  for (const auto& key : flat.keys()) {
    if (!known.count(key)) throw InvalidInput("unknown config key '" + key + "'");
  }
  for (auto& f : fs) {
    if (flat.has(f.key)) f.set(flat.at(f.key));
  }
  return c;
}

/// Every key, in canonical order.
inline FlatConfig config_to_flat(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  FlatConfig flat;
  for (const auto& f : detail::fields(copy)) flat.set(f.key, f.get());
  return flat;
}

inline ExperimentConfig parse_config(const std::string& text) { return config_from_flat(FlatConfig::parse(text)); }
inline std::string config_to_text(const ExperimentConfig& c) { return config_to_flat(c).to_text(); }

}  // namespace pipa
