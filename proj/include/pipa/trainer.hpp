#pragma once

// Mini-batch training with per-step diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <tuple>
#include <type_traits>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/losses.hpp"
#include "pipa/models.hpp"
#include "pipa/optim.hpp"
#include "pipa/seqdata.hpp"

namespace pipa {

enum class LrSchedule { kConstant, kLinear };

inline std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "linear"; }
inline LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "linear") return LrSchedule::kLinear;
  throw InvalidInput("unknown lr schedule '" + s + "' (expected constant|linear)");
}

struct TrainConfig {
  LossConfig loss;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  AdamParams adam;
  double lr = 0.01;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::vector<double> grid;
  std::size_t probe_size = 256;
  /// Keeps g at its initial value (the fixed-0.5 ablation when raw = 0).
  bool freeze_value = false;
  LrSchedule schedule = LrSchedule::kConstant;

  void validate() const {
    loss.validate();
    require(lr >= 0.0, "lr must be nonnegative");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(epochs >= 1, "epochs must be at least 1");
    for (double g : grid) require(g >= 0.0, "grid learning rates must be nonnegative");
  }
};

struct MetricsRow {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double value_geo_mean = std::numeric_limits<double>::quiet_NaN();
  double reward_pos = std::numeric_limits<double>::quiet_NaN();
  double reward_neg = std::numeric_limits<double>::quiet_NaN();
  double clip_rate = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss,value_geo_mean,reward_pos,reward_neg,clip_rate";

/// Append-only, one row per optimization step. Diagnostics are measured on
/// the parameters the step starts from.
class MetricsLog {
 public:
  void append(const MetricsRow& row) { rows_.push_back(row); }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  std::string to_csv() const {
    std::ostringstream os;
    os << kMetricsHeader << '\n';
    os.precision(17);
    for (const auto& r : rows_) {
      os << r.step << ',' << r.loss << ',' << r.value_geo_mean << ',' << r.reward_pos << ',' << r.reward_neg << ','
         << r.clip_rate << '\n';
    }
    return os.str();
  }

  int epochs() const { return rows_.empty() ? 0 : rows_.back().epoch + 1; }

  /// Mean of a column over the rows of one epoch, skipping NaNs.
  double epoch_mean(int epoch, double MetricsRow::*column) const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows_) {
      if (r.epoch != epoch || std::isnan(r.*column)) continue;
      s += r.*column;
      ++n;
    }
    return n ? s / n : std::numeric_limits<double>::quiet_NaN();
  }

 private:
  std::vector<MetricsRow> rows_;
};

struct TrainResult {
  ModelBundle bundle;
  MetricsLog log;
};

/// Mean implicit reward log f(y|x) - log p_prior(y|x) over correct and
/// incorrect records.
inline std::pair<double, double> implicit_rewards(const ModelBundle& b, std::span<const Example> probe) {
  double pos = 0.0;
  double neg = 0.0;
  int np = 0;
  int nn = 0;
  for (const auto& e : probe) {
    const double r = b.policy.sequence_logprob(e.prompt, e.answer) - b.prior.sequence_logprob(e.prompt, e.answer);
    if (e.all_correct()) {
      pos += r;
      ++np;
    } else {
      neg += r;
      ++nn;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {np ? pos / np : nan, nn ? neg / nn : nan};
}

/// (Π_t p(c_t | x, y_<t))^{1/T} under the value table.
inline double value_geo_likelihood(const ModelBundle& b, const Example& e) {
  const auto& s = b.shape();
  const int pid = s.prompt_id(e.prompt);
  double lp = 0.0;
  for (std::size_t t = 0; t < e.answer.size(); ++t) {
    const double g = b.value.value(s.row(pid, std::span<const int>(e.answer).subspan(0, t)));
    lp += std::log(e.labels[t] ? g : 1.0 - g);
  }
  return std::exp(lp / static_cast<double>(e.answer.size()));
}

/// Fraction of tokens whose PIPA-M ratio f g / p exceeds 1 - ε.
inline double clip_rate(const ModelBundle& b, std::span<const Example> records, double epsilon) {
  std::size_t hit = 0;
  std::size_t total = 0;
  for (const auto& e : records) {
    for (const auto& term : per_token_terms(b, e, LossKind::kPipaM, epsilon)) {
      ++total;
      if (term.f * term.g / term.p > 1.0 - epsilon) ++hit;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

inline void check_compatible(const Dataset& data, const LossConfig& loss) {
  if (is_paired_loss(loss.kind) && !data.is_paired()) {
    throw InvalidInput("loss '" + to_string(loss.kind) + "' requires paired records");
  }
  if (loss.kind == LossKind::kKto) {
    const Dataset flat = as_unpaired(data);
    for (const auto& e : flat.examples()) {
      if (!e.constant_labels()) throw InvalidInput("kto requires answer-level labels");
    }
  }
}

namespace detail {

inline std::vector<Example> probe_batch(const std::vector<Example>& records, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(size, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<Example> out;
  for (auto i : idx) out.push_back(records[i]);
  return out;
}

}  // namespace detail

/// Sums per-record gradients of the configured loss over `batch` into `grad`
/// (which is resized and zeroed) and returns the summed loss.
template <class Record>
double accumulate_gradient(const ModelBundle& b, std::span<const Record> batch, const LossConfig& cfg,
                           const std::map<int, double>& z, std::vector<double>& grad) {
  grad.assign(b.num_params(), 0.0);
  double total = 0.0;
  for (const auto& rec : batch) {
    Tape tape;
    Var root;
    if constexpr (std::is_same_v<Record, PairedExample>) {
      root = build_loss(tape, b, rec, cfg);
    } else {
      double zx = 0.0;
      if (auto it = z.find(b.shape().prompt_id(rec.prompt)); it != z.end()) zx = it->second;
      root = build_loss(tape, b, rec, cfg, zx);
    }
    total += root.value();
    for (const auto& [id, g] : tape.backward(root)) grad[id] += g;
  }
  return total;
}

/// Mini-batch training of f and g; the prior is never written.
inline TrainResult train(ModelBundle bundle, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  bundle.validate();
  check_compatible(data, cfg.loss);
  require(!data.empty(), "training dataset is empty");

  const bool paired = is_paired_loss(cfg.loss.kind);
  const Dataset flat = as_unpaired(data);
  const std::vector<Example>& examples = flat.examples();
  const std::size_t n = paired ? data.pairs().size() : examples.size();
  const std::vector<Example> probe = detail::probe_batch(examples, cfg.probe_size, cfg.seed);

  std::vector<double> theta = bundle.parameters();
  std::vector<bool> mask(theta.size(), true);
  if (cfg.freeze_value) {
    for (std::size_t i = bundle.policy.size(); i < mask.size(); ++i) mask[i] = false;
  }
  Optimizer opt(cfg.optimizer, theta.size(), cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total_steps = steps_per_epoch * cfg.epochs;

  MetricsLog log;
  std::vector<double> grad;
  std::vector<Example> batch_ex;
  std::vector<PairedExample> batch_pairs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      batch_ex.clear();
      batch_pairs.clear();
      for (std::size_t i = start; i < end; ++i) {
        if (paired) {
          batch_pairs.push_back(data.pairs()[order[i]]);
        } else {
          batch_ex.push_back(examples[order[i]]);
        }
      }

      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      std::tie(row.reward_pos, row.reward_neg) = implicit_rewards(bundle, probe);
      if (uses_value_model(cfg.loss.kind)) {
        double s = 0.0;
        for (const auto& e : batch_ex) s += value_geo_likelihood(bundle, e);
        row.value_geo_mean = s / static_cast<double>(batch_ex.size());
      }
      if (cfg.loss.kind == LossKind::kPipaM) row.clip_rate = clip_rate(bundle, batch_ex, cfg.loss.epsilon);

      std::map<int, double> z;
      if (needs_reference_point(cfg.loss.kind) && !cfg.loss.z0) {
        z = estimate_kl_z(bundle, batch_ex, cfg.loss.z_mode);
      }
      const double total = paired ? accumulate_gradient<PairedExample>(bundle, batch_pairs, cfg.loss, z, grad)
                                  : accumulate_gradient<Example>(bundle, batch_ex, cfg.loss, z, grad);
      const double count = static_cast<double>(end - start);
      row.loss = total / count;
      for (double& g : grad) g /= count;

      double lr = cfg.lr;
      if (cfg.schedule == LrSchedule::kLinear) {
        lr *= 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
      }
      opt.step(theta, grad, lr, &mask);
      bundle.set_parameters(theta);
      log.append(row);
      ++step;
    }
  }
  return {std::move(bundle), std::move(log)};
}

struct GridRun {
  double lr;
  double final_loss;
  TrainResult result;
};

struct GridResult {
  std::size_t best = 0;
  std::vector<GridRun> runs;
  const GridRun& best_run() const { return runs.at(best); }
};

/// One independent run per grid lr; picks the lowest final-epoch mean loss,
/// ties going to the smaller lr.
inline GridResult grid_search(const std::function<ModelBundle()>& factory, const Dataset& data,
                              const TrainConfig& cfg) {
  require(!cfg.grid.empty(), "grid_search needs a non-empty grid");
  GridResult out;
  for (double lr : cfg.grid) {
    TrainConfig c = cfg;
    c.lr = lr;
    c.grid.clear();
    TrainResult r = train(factory(), data, c);
    const double final_loss = r.log.epoch_mean(r.log.epochs() - 1, &MetricsRow::loss);
    out.runs.push_back({lr, final_loss, std::move(r)});
  }
  for (std::size_t i = 1; i < out.runs.size(); ++i) {
    const auto& cand = out.runs[i];
    const auto& best = out.runs[out.best];
    if (cand.final_loss < best.final_loss || (cand.final_loss == best.final_loss && cand.lr < best.lr)) out.best = i;
  }
  return out;
}

}  // namespace pipa
