#pragma once

// Numeric checks of the equivalence identities and the recovery claims.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/losses.hpp"
#include "pipa/models.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/synthworld.hpp"
#include "pipa/tape.hpp"
#include "pipa/trainer.hpp"

namespace pipa {

struct VerificationReport {
  std::string name;
  std::size_t trials = 0;
  double max_discrepancy = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::map<std::string, double> aux;

  void settle() { passed = max_discrepancy <= tolerance; }

  std::string summary() const {
    std::ostringstream os;
    os << std::setprecision(6) << name << ": " << (passed ? "PASS" : "FAIL") << " trials=" << trials
       << " max_discrepancy=" << max_discrepancy << " tolerance=" << tolerance;
    for (const auto& [k, v] : aux) os << ' ' << k << '=' << v;
    return os.str();
  }

  static std::string csv_header() { return "name,trials,max_discrepancy,tolerance,passed,aux"; }

  std::string csv_row() const {
    std::ostringstream os;
    os << std::setprecision(17) << name << ',' << trials << ',' << max_discrepancy << ',' << tolerance << ','
       << (passed ? 1 : 0) << ',';
    bool first = true;
    for (const auto& [k, v] : aux) {
      os << (first ? "" : ";") << k << '=' << v;
      first = false;
    }
    return os.str();
  }
};

namespace detail {

/// Log-uniform positive reals in [1e-6, 1].
inline double positive_real(std::mt19937_64& rng) {
  return std::exp(std::uniform_real_distribution<double>(std::log(1e-6), 0.0)(rng));
}

}  // namespace detail

/// −log σ(r) with β = 1 (on the tape) against −log of the Bayes posterior
/// f(y+) p(y-) / (f(y+) p(y-) + p(y+) f(y-)).
inline VerificationReport check_dpo_equivalence(std::uint64_t seed, std::size_t trials) {
  require(trials >= 1, "trials must be at least 1");
  std::mt19937_64 rng(seed);
  VerificationReport rep{"dpo-equivalence", trials, 0.0, 1e-10, false, {}};
  for (std::size_t i = 0; i < trials; ++i) {
    const double f_pos = detail::positive_real(rng);
    const double f_neg = detail::positive_real(rng);
    const double p_pos = detail::positive_real(rng);
    const double p_neg = detail::positive_real(rng);
    Tape t;
    const Var margin = (log(t.constant(f_pos)) - std::log(p_pos)) - (log(t.constant(f_neg)) - std::log(p_neg));
    const double lhs = pairwise_logistic_loss(margin, 1.0).value();
    const double rhs = -std::log(f_pos * p_neg / (f_pos * p_neg + p_pos * f_neg));
    rep.max_discrepancy = std::max(rep.max_discrepancy, std::abs(lhs - rhs));
  }
  rep.settle();
  return rep;
}

/// σ(h − z) against f / (f + p e^z), and the complement for c = 0.
inline VerificationReport check_kto_equivalence(std::uint64_t seed, std::size_t trials) {
  require(trials >= 1, "trials must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> zdist(0.0, 3.0);
  VerificationReport rep{"kto-equivalence", trials, 0.0, 1e-10, false, {}};
  for (std::size_t i = 0; i < trials; ++i) {
    const double f = detail::positive_real(rng);
    const double p = detail::positive_real(rng);
    const double z = zdist(rng);
    Tape t;
    const Var h = log(t.constant(f)) - std::log(p);
    const Var zv = stop_gradient(t.constant(z));
    const double pos = sigmoid(h - zv).value();
    const double neg = sigmoid(zv - h).value();
    const double bayes = f / (f + p * std::exp(z));
    rep.max_discrepancy = std::max({rep.max_discrepancy, std::abs(pos - bayes), std::abs(neg - (1.0 - bayes))});
  }
  rep.settle();
  return rep;
}

enum class PriorMode { kExact, kFitted };

inline std::string to_string(PriorMode m) { return m == PriorMode::kExact ? "exact" : "fitted"; }

/// The world's true conditional that a loss kind's prior stands for: the
/// marginal p(y_t | x, y_<t) for PIPA-M and the rest, the c_t = 0 law for
/// PIPA-N (the post-fault policy under step labels).
inline TabularPolicy exact_prior(const World& w, LossKind kind, Level level) {
  if (kind == LossKind::kPipaN) {
    return level == Level::kStep ? w.negative.frozen_copy() : world_policy(w, WorldLaw::kNegative, w.len - 1);
  }
  return world_policy(w, WorldLaw::kMarginal, w.len - 1);
}

inline TabularPolicy fitted_prior(const World& w, LossKind kind, const Dataset& data, int epochs, double lr) {
  const SftSelector sel = kind == LossKind::kPipaN ? SftSelector::kNegative : SftSelector::kAll;
  return fit_sft(TabularPolicy(w.shape()), data, sel, epochs, lr);
}

/// Mean over prompts of TV(f(.|x), p(.|x, c=1)).
inline double recovery_tv(const World& w, const TabularPolicy& f) {
  double tv = 0.0;
  for (int x = 0; x < w.prompts; ++x) {
    std::vector<double> fp;
    for (const auto& sp : enumerate_sequences(f, Tokens{x}, w.len)) fp.push_back(sp.prob);
    tv += total_variation(fp, world_answer_distribution(w, x, true));
  }
  return tv / w.prompts;
}

/// Mean |g(x, y_<t) − p(c_t=1 | x, y_<t)| over every prefix of the records.
inline double value_error(const World& w, const ModelBundle& b, std::span<const Example> records, Level level) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& e : records) {
    const int x = e.prompt[0];
    for (std::size_t t = 0; t < e.answer.size(); ++t) {
      const auto prefix = std::span<const int>(e.answer).subspan(0, t);
      acc += std::abs(b.value.value(b.shape().row(x, prefix)) - exact_value_target(w, x, prefix, level));
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

/// Mean |F_t − p(c_t=1 | x, y_<=t)| with F_t from the PIPA-M or PIPA-N map.
inline double posterior_error(const World& w, const ModelBundle& b, std::span<const Example> records, LossKind kind,
                              Level level, double epsilon) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& e : records) {
    const auto terms = per_token_terms(b, e, kind, epsilon);
    for (std::size_t t = 0; t < terms.size(); ++t) {
      acc += std::abs(terms[t].F - exact_token_posterior(w, e.prompt[0], e.answer, static_cast<int>(t) + 1, level));
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

struct RecoveryOptions {
  LossKind kind = LossKind::kPipaM;
  std::size_t n = 50000;
  Level level = Level::kStep;
  PriorMode prior = PriorMode::kExact;
  std::uint64_t data_seed = 1;
  TrainConfig train;
  int sft_epochs = 500;
  double sft_lr = 0.1;
  double tolerance = 0.05;
};

struct RecoveryResult {
  VerificationReport report;
  TrainResult run;
  double tv = 0.0;
  double oracle_tv = 0.0;
  double value_error = 0.0;
  double posterior_error = 0.0;
  double final_clip_rate = 0.0;
};

/// Recovery on freshly sampled data; see the overload for a fixed dataset.
inline RecoveryResult recovery_experiment(const World& w, const Dataset& data, const RecoveryOptions& opt);

inline RecoveryResult recovery_experiment(const World& w, const RecoveryOptions& opt) {
  return recovery_experiment(w, sample_dataset(w, opt.n, opt.level, opt.data_seed), opt);
}

/// Empirical frequency of correct answers per prompt against p(y|x,c=1).
inline double count_oracle_tv(const World& w, const Dataset& data) {
  const auto v = static_cast<std::size_t>(w.vocab);
  const std::size_t n_answers = static_cast<std::size_t>(std::pow(w.vocab, w.len));
  std::vector<std::vector<double>> counts(static_cast<std::size_t>(w.prompts), std::vector<double>(n_answers, 0.0));
  std::vector<double> totals(static_cast<std::size_t>(w.prompts), 0.0);
  const Dataset flat = as_unpaired(data);
  for (const auto& e : flat.examples()) {
    if (!e.all_correct()) continue;
    std::size_t code = 0;
    for (int tok : e.answer) code = code * v + static_cast<std::size_t>(tok);
    counts[static_cast<std::size_t>(e.prompt[0])][code] += 1.0;
    totals[static_cast<std::size_t>(e.prompt[0])] += 1.0;
  }
  double tv = 0.0;
  for (int x = 0; x < w.prompts; ++x) {
    auto& c = counts[static_cast<std::size_t>(x)];
    const double total = totals[static_cast<std::size_t>(x)];
    for (double& v_ : c) v_ = total > 0.0 ? v_ / total : 1.0 / static_cast<double>(n_answers);
    tv += total_variation(c, world_answer_distribution(w, x, true));
  }
  return tv / w.prompts;
}

/// Closed-form optimum of the PIPA-N label likelihood under step labels.
/// Per context the odds n1(y)/n0(y) are matched exactly, which gives
/// f(y) ∝ prior(y) n1(y) / n0(y). Tokens never seen with c=0 get a half
/// count in the denominator.
inline TabularPolicy label_mle_policy(const Dataset& data, const TabularPolicy& prior) {
  const ModelShape& s = prior.shape();
  const auto v = static_cast<std::size_t>(s.vocab);
  std::vector<double> pos(s.rows() * v, 0.0);
  std::vector<double> neg(s.rows() * v, 0.0);
  const Dataset flat = as_unpaired(data);
  for (const auto& e : flat.examples()) {
    for (std::size_t t = 0; t < e.answer.size(); ++t) {
      const std::size_t r = s.row(e.prompt[0], std::span<const int>(e.answer).subspan(0, t));
      (e.labels[t] ? pos : neg)[r * v + static_cast<std::size_t>(e.answer[t])] += 1.0;
    }
  }
  TabularPolicy f(s);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    std::vector<double> q(v, 0.0);
    double total = 0.0;
    for (std::size_t y = 0; y < v; ++y) {
      const double n1 = pos[r * v + y];
      const double n0 = neg[r * v + y] > 0.0 ? neg[r * v + y] : 0.5;
      q[y] = std::exp(prior.token_logprob(r, static_cast<int>(y))) * n1 / n0;
      total += q[y];
    }
    if (total == 0.0) continue;
    for (double& p : q) p /= total;
    f.set_row_probabilities(r, q);
  }
  return f;
}

/// Scores a trained bundle against the world: TV to p(y|x,c=1), value and
/// posterior errors for the PIPA kinds, and the clip rate for PIPA-M.
inline RecoveryResult assess_recovery(const World& w, const Dataset& data, const ModelBundle& b, LossKind kind,
                                      double epsilon, double tolerance) {
  const Dataset flat = as_unpaired(data);
  const auto& records = flat.examples();
  RecoveryResult out;
  out.tv = recovery_tv(w, b.policy);
  out.oracle_tv = count_oracle_tv(w, data);
  if (uses_value_model(kind)) {
    out.value_error = value_error(w, b, records, data.level());
    out.posterior_error = posterior_error(w, b, records, kind, data.level(), epsilon);
  }
  if (kind == LossKind::kPipaM) out.final_clip_rate = clip_rate(b, records, epsilon);

  auto& rep = out.report;
  rep.name = "recovery-" + to_string(kind);
  rep.trials = records.size();
  rep.max_discrepancy = out.tv;
  rep.tolerance = tolerance;
  rep.aux["oracle_tv"] = out.oracle_tv;
  rep.aux["value_error"] = out.value_error;
  rep.aux["posterior_error"] = out.posterior_error;
  rep.aux["clip_rate"] = out.final_clip_rate;
  if (kind == LossKind::kPipaN && data.level() == Level::kStep) {
    rep.aux["label_mle_tv"] = recovery_tv(w, label_mle_policy(data, b.prior));
  }
  rep.settle();
  return out;
}

inline RecoveryResult recovery_experiment(const World& w, const Dataset& data, const RecoveryOptions& opt) {
  const TabularPolicy prior = opt.prior == PriorMode::kExact
                                  ? exact_prior(w, opt.kind, data.level())
                                  : fitted_prior(w, opt.kind, data, opt.sft_epochs, opt.sft_lr);
  TrainConfig cfg = opt.train;
  cfg.loss.kind = opt.kind;
  TrainResult run = train(ModelBundle::make(prior, prior), data, cfg);
  RecoveryResult out = assess_recovery(w, data, run.bundle, opt.kind, cfg.loss.epsilon, opt.tolerance);
  out.run = std::move(run);
  out.report.aux["exact_prior"] = opt.prior == PriorMode::kExact ? 1.0 : 0.0;
  return out;
}

/// Per-epoch mean clip-activation rate of a PIPA-M training log.
inline std::vector<double> clip_rate_survey(const MetricsLog& log) {
  std::vector<double> out;
  for (int e = 0; e < log.epochs(); ++e) out.push_back(log.epoch_mean(e, &MetricsRow::clip_rate));
  return out;
}

struct AblationOptions {
  std::size_t n = 4000;
  std::uint64_t data_seed = 1;
  std::size_t probe_n = 2000;
  TrainConfig train;
  /// Also trains PIPA-M on answer-level and step-level labels of the same samples.
  bool include_pipa = false;
};

/// DPO against Step-DPO-L1 on the same pairs. Reports final mean implicit
/// reward on held-out correct answers; passes when Step-DPO-L1 is not below DPO.
inline VerificationReport step_vs_answer_ablation(const World& w, const AblationOptions& opt) {
  const Dataset steps = sample_dataset(w, opt.n, Level::kStep, opt.data_seed);
  const Dataset pairs = pair_by_problem(steps, opt.data_seed);
  require(!pairs.empty(), "ablation produced no pairs");
  const Dataset probe_all = sample_dataset(w, opt.probe_n, Level::kAnswer, opt.data_seed ^ 0x5bd1e995ULL);
  std::vector<Example> probe;
  for (const auto& e : probe_all.examples()) {
    if (e.all_correct()) probe.push_back(e);
  }
  const TabularPolicy prior = world_policy(w, WorldLaw::kMarginal, w.len - 1);

  auto reward_after = [&](LossKind kind, const Dataset& d) {
    TrainConfig cfg = opt.train;
    cfg.loss.kind = kind;
    const TrainResult r = train(ModelBundle::make(prior, prior), d, cfg);
    return implicit_rewards(r.bundle, probe).first;
  };

  VerificationReport rep;
  rep.name = "step-vs-answer";
  rep.trials = pairs.size();
  const double dpo = reward_after(LossKind::kDpo, pairs);
  const double step = reward_after(LossKind::kStepDpoL1, pairs);
  rep.aux["reward_pos_dpo"] = dpo;
  rep.aux["reward_pos_step_dpo_l1"] = step;
  rep.aux["correct_prefix_mass"] = w.correct_prefix_mass();
  if (opt.include_pipa) {
    std::vector<Example> answer_level = steps.examples();
    for (auto& e : answer_level) {
      e.labels.assign(e.labels.size(), e.all_correct() ? 1 : 0);
      e.step_starts.reset();
      e.q_values.reset();
    }
    rep.aux["reward_pos_pipa_m_answer"] =
        reward_after(LossKind::kPipaM, Dataset::unpaired(std::move(answer_level), Level::kAnswer));
    rep.aux["reward_pos_pipa_m_step"] = reward_after(LossKind::kPipaM, steps);
  }
  rep.max_discrepancy = dpo - step;
  rep.tolerance = 0.0;
  rep.settle();
  return rep;
}

/// The fixed-g ablation: the same run with the value table frozen at its
/// initial g = 1/2. Passes when the trained value model has strictly smaller
/// token-posterior error.
inline VerificationReport value_ablation(const World& w, const Dataset& data, const RecoveryOptions& opt) {
  RecoveryOptions trained_opt = opt;
  trained_opt.train.freeze_value = false;
  RecoveryOptions frozen_opt = opt;
  frozen_opt.train.freeze_value = true;
  const RecoveryResult trained = recovery_experiment(w, data, trained_opt);
  const RecoveryResult frozen = recovery_experiment(w, data, frozen_opt);
  VerificationReport rep;
  rep.name = "value-ablation-" + to_string(opt.kind);
  rep.trials = trained.report.trials;
  rep.max_discrepancy = trained.posterior_error - frozen.posterior_error;
  rep.tolerance = 0.0;
  rep.aux["posterior_error_trained"] = trained.posterior_error;
  rep.aux["posterior_error_fixed"] = frozen.posterior_error;
  rep.aux["tv_trained"] = trained.tv;
  rep.aux["tv_fixed"] = frozen.tv;
  rep.settle();
  rep.passed = rep.passed && rep.max_discrepancy < 0.0;
  return rep;
}

/// Runs the ablation for data and training seeds 1..seeds and compares the
/// medians. Passes when the Step-DPO-L1 median strictly exceeds DPO's.
inline VerificationReport step_vs_answer_median(const World& w, const AblationOptions& opt, int seeds) {
  require(seeds >= 1, "seeds must be at least 1");
  std::vector<double> dpo;
  std::vector<double> step;
  std::size_t trials = 0;
  for (int s = 1; s <= seeds; ++s) {
    AblationOptions o = opt;
    o.data_seed = opt.data_seed + static_cast<std::uint64_t>(s - 1);
    o.train.seed = opt.train.seed + static_cast<std::uint64_t>(s - 1);
    const auto r = step_vs_answer_ablation(w, o);
    dpo.push_back(r.aux.at("reward_pos_dpo"));
    step.push_back(r.aux.at("reward_pos_step_dpo_l1"));
    trials += r.trials;
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  VerificationReport rep;
  rep.name = "step-vs-answer";
  rep.trials = trials;
  rep.aux["median_reward_pos_dpo"] = median(dpo);
  rep.aux["median_reward_pos_step_dpo_l1"] = median(step);
  rep.aux["seeds"] = seeds;
  rep.aux["correct_prefix_mass"] = w.correct_prefix_mass();
  int wins = 0;
  for (std::size_t i = 0; i < dpo.size(); ++i) wins += step[i] > dpo[i] ? 1 : 0;
  rep.aux["step_wins"] = wins;
  rep.max_discrepancy = median(dpo) - median(step);
  rep.tolerance = 0.0;
  rep.settle();
  rep.passed = rep.passed && rep.max_discrepancy < 0.0;
  return rep;
}

struct ThresholdSweepOptions {
  std::vector<double> thresholds{-0.5, 0.0, 0.5, 0.9};
  std::size_t n = 4000;
  std::uint64_t data_seed = 1;
  LossKind kind = LossKind::kPipaM;
  TrainConfig train;
};

/// Relabels synthesized Q-values at each threshold and trains on each
/// labelling. Score is −TV(f, p(.|x,c=1)); aux records every score, the
/// winning threshold, and whether the winner is interior. Always passes.
inline VerificationReport threshold_sweep(const World& w, const ThresholdSweepOptions& opt) {
  require(!opt.thresholds.empty(), "threshold sweep needs at least one threshold");
  const Dataset base = sample_dataset(w, opt.n, Level::kStep, opt.data_seed);
  const TabularPolicy prior = exact_prior(w, opt.kind, Level::kStep);
  VerificationReport rep;
  rep.name = "threshold-sweep";
  rep.trials = opt.thresholds.size();
  std::size_t best = 0;
  std::vector<double> scores;
  for (double th : opt.thresholds) {
    TrainConfig cfg = opt.train;
    cfg.loss.kind = opt.kind;
    const TrainResult r = train(ModelBundle::make(prior, prior), relabel_from_q(base, th), cfg);
    scores.push_back(-recovery_tv(w, r.bundle.policy));
    std::ostringstream key;
    key << "score@" << th;
    rep.aux[key.str()] = scores.back();
    if (scores.back() > scores[best]) best = scores.size() - 1;
  }
  rep.aux["best_threshold"] = opt.thresholds[best];
  rep.aux["interior_maximum"] = (best > 0 && best + 1 < opt.thresholds.size()) ? 1.0 : 0.0;
  rep.settle();
  return rep;
}

}  // namespace pipa
