#pragma once

// Alignment losses as tape expressions over a ModelBundle.
//
// Notation per answer token t: f_t = f(y_t | x, y_<t) from the trainable
// policy, g_t = g(x, y_<t) from the value table, p_t = p_prior(y_t | x, y_<t),
// and the log-ratio r_t = log(f_t / p_t).

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/models.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/tape.hpp"

namespace pipa {

enum class LossKind {
  kPipaM,
  kPipaN,
  kDpo,
  kIpo,
  kKto,
  kStepDpoL0,
  kStepDpoL1,
  kStepKto,
  kStepKtoL1,
  kSft,
};

inline constexpr LossKind kAllLossKinds[] = {
    LossKind::kPipaM,     LossKind::kPipaN,   LossKind::kDpo,       LossKind::kIpo, LossKind::kKto,
    LossKind::kStepDpoL0, LossKind::kStepDpoL1, LossKind::kStepKto, LossKind::kStepKtoL1, LossKind::kSft,
};

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kPipaM: return "pipa-m";
    case LossKind::kPipaN: return "pipa-n";
    case LossKind::kDpo: return "dpo";
    case LossKind::kIpo: return "ipo";
    case LossKind::kKto: return "kto";
    case LossKind::kStepDpoL0: return "step-dpo-l0";
    case LossKind::kStepDpoL1: return "step-dpo-l1";
    case LossKind::kStepKto: return "step-kto";
    case LossKind::kStepKtoL1: return "step-kto-l1";
    case LossKind::kSft: return "sft";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  for (LossKind k : kAllLossKinds) {
    if (to_string(k) == s) return k;
  }
  throw InvalidInput("unknown loss kind '" + s + "'");
}

inline bool is_paired_loss(LossKind k) {
  return k == LossKind::kDpo || k == LossKind::kIpo || k == LossKind::kStepDpoL0 || k == LossKind::kStepDpoL1;
}
inline bool needs_reference_point(LossKind k) {
  return k == LossKind::kKto || k == LossKind::kStepKto || k == LossKind::kStepKtoL1;
}
inline bool uses_value_model(LossKind k) { return k == LossKind::kPipaM || k == LossKind::kPipaN; }

enum class ZMode { kExact, kBatch };

inline std::string to_string(ZMode m) { return m == ZMode::kExact ? "exact" : "batch"; }
inline ZMode parse_z_mode(const std::string& s) {
  if (s == "exact") return ZMode::kExact;
  if (s == "batch" || s == "batch-estimate") return ZMode::kBatch;
  throw InvalidInput("unknown z mode '" + s + "' (expected exact|batch)");
}

struct LossConfig {
  LossKind kind = LossKind::kPipaM;
  double beta = 0.1;
  double epsilon = 1e-6;
  double sft_coeff = 0.0;
  ZMode z_mode = ZMode::kBatch;
  /// Fixed reference point for the KTO family; estimated per batch when unset.
  std::optional<double> z0;

  void validate() const {
    require(beta > 0.0, "beta must be positive");
    require(epsilon > 0.0 && epsilon < 1e-3, "epsilon must lie in (0, 1e-3)");
    require(sft_coeff >= 0.0, "sft_coeff must be nonnegative");
  }
};

/// Prior probabilities below this abort instead of being clipped.
inline constexpr double kMinPriorProb = 1e-300;

namespace detail {

inline double prior_prob(const ModelBundle& b, std::size_t row, int token) {
  const double p = std::exp(b.prior.token_logprob(row, token));
  if (!(p >= kMinPriorProb)) {
    throw NumericError("prior assigns (near) zero mass to an observed token (row " + std::to_string(row) +
                       ", token " + std::to_string(token) + ")");
  }
  return p;
}

/// Resolves rows for each token of an answer once.
struct TokenRows {
  int prompt;
  std::vector<std::size_t> rows;

  TokenRows(const ModelShape& s, const Tokens& prompt_tokens, const Tokens& answer)
      : prompt(s.prompt_id(prompt_tokens)) {
    require(static_cast<int>(answer.size()) <= s.max_len, "answer longer than T_max");
    rows.reserve(answer.size());
    for (std::size_t t = 0; t < answer.size(); ++t) {
      rows.push_back(s.row(prompt, std::span<const int>(answer).subspan(0, t)));
    }
  }
};

}  // namespace detail

/// log f(y_t | x, y_<t) with the row's logits registered as parameters.
inline Var policy_log_prob(Tape& tape, const ModelBundle& b, std::size_t row, int token) {
  if (b.policy.frozen()) throw InvalidInput("frozen policies cannot register parameters");
  const int v = b.shape().vocab;
  require(token >= 0 && token < v, "answer token out of vocabulary");
  const auto logits = b.policy.row_logits(row);
  std::vector<Var> xs;
  xs.reserve(static_cast<std::size_t>(v));
  for (int j = 0; j < v; ++j) xs.push_back(tape.param(b.policy_param(row, j), logits[static_cast<std::size_t>(j)]));
  return xs[static_cast<std::size_t>(token)] - tape.logsumexp(xs);
}

inline Var value_raw(Tape& tape, const ModelBundle& b, std::size_t row) {
  return tape.param(b.value_param(row), b.value.raw()[row]);
}

/// r_t = log f_t - log p_t for every token of an answer.
inline std::vector<Var> log_ratios(Tape& tape, const ModelBundle& b, const Tokens& prompt, const Tokens& answer) {
  const detail::TokenRows tr(b.shape(), prompt, answer);
  std::vector<Var> out;
  out.reserve(answer.size());
  for (std::size_t t = 0; t < answer.size(); ++t) {
    const double p = detail::prior_prob(b, tr.rows[t], answer[t]);
    out.push_back(policy_log_prob(tape, b, tr.rows[t], answer[t]) - std::log(p));
  }
  return out;
}

/// Plain-double per-token quantities, for diagnostics.
struct PerTokenTerms {
  double f;
  double g;
  double p;
  double F;
  double r;
};

/// F_t is the PIPA-M clipped ratio or the PIPA-N tau ratio depending on `kind`.
inline std::vector<PerTokenTerms> per_token_terms(const ModelBundle& b, const Example& e, LossKind kind,
                                                  double epsilon = 1e-6) {
  const detail::TokenRows tr(b.shape(), e.prompt, e.answer);
  std::vector<PerTokenTerms> out;
  for (std::size_t t = 0; t < e.answer.size(); ++t) {
    PerTokenTerms x{};
    x.f = std::exp(b.policy.token_logprob(tr.rows[t], e.answer[t]));
    x.g = b.value.value(tr.rows[t]);
    x.p = detail::prior_prob(b, tr.rows[t], e.answer[t]);
    x.r = std::log(x.f) - std::log(x.p);
    if (kind == LossKind::kPipaN) {
      x.F = tau_value(std::exp(x.r + b.value.raw()[tr.rows[t]]));
    } else {
      x.F = std::min(std::max(x.f * x.g / x.p, 0.0), 1.0 - epsilon);
    }
    out.push_back(x);
  }
  return out;
}

/// -Σ_{c_t=1} log F_t - Σ_{c_t=0} log(1 - F_t), F_t = clip(f_t g_t / p_t, 0, 1-ε).
inline Var pipa_m_loss(Tape& tape, const ModelBundle& b, const Example& e, const LossConfig& cfg) {
  const detail::TokenRows tr(b.shape(), e.prompt, e.answer);
  std::vector<Var> terms;
  for (std::size_t t = 0; t < e.answer.size(); ++t) {
    const double p = detail::prior_prob(b, tr.rows[t], e.answer[t]);
    const Var f = exp(policy_log_prob(tape, b, tr.rows[t], e.answer[t]));
    const Var g = sigmoid(value_raw(tape, b, tr.rows[t]));
    const Var F = clip(f * g / p, 0.0, 1.0 - cfg.epsilon);
    terms.push_back(e.labels[t] ? -log(F) : -log(1.0 - F));
  }
  return tape.sum(terms);
}

/// Same aggregation with F_t = τ(f_t g_t / (p_t (1 - g_t))).
inline Var pipa_n_loss(Tape& tape, const ModelBundle& b, const Example& e, const LossConfig&) {
  const detail::TokenRows tr(b.shape(), e.prompt, e.answer);
  std::vector<Var> terms;
  for (std::size_t t = 0; t < e.answer.size(); ++t) {
    const double p = detail::prior_prob(b, tr.rows[t], e.answer[t]);
    const Var log_f = policy_log_prob(tape, b, tr.rows[t], e.answer[t]);
    // g / (1 - g) = e^raw for g = σ(raw).
    const Var ratio = exp(log_f + value_raw(tape, b, tr.rows[t]) - std::log(p));
    // 1 - τ(u) = 1 / (1 + u)
    terms.push_back(e.labels[t] ? -log(tau(ratio)) : log(1.0 + ratio));
  }
  return tape.sum(terms);
}

/// -log σ(β · margin).
inline Var pairwise_logistic_loss(Var margin, double beta) { return -log_sigmoid(beta * margin); }

enum class StepDpoVariant { kDpo, kL0, kL1 };

/// Generalized Step-DPO. kDpo scores whole sequences; kL0 drops the
/// correct-labeled tokens of the rejected answer; kL1 keeps them in the
/// forward value but stops their gradient.
inline Var step_dpo_loss(Tape& tape, const ModelBundle& b, const PairedExample& pair, const LossConfig& cfg,
                         StepDpoVariant variant) {
  const auto pos = log_ratios(tape, b, pair.prompt, pair.chosen.answer);
  const auto neg = log_ratios(tape, b, pair.prompt, pair.rejected.answer);
  std::vector<Var> wrong;
  std::vector<Var> right;
  for (std::size_t t = 0; t < neg.size(); ++t) {
    (variant != StepDpoVariant::kDpo && pair.rejected.labels[t] ? right : wrong).push_back(neg[t]);
  }
  Var margin = tape.sum(pos) - tape.sum(wrong);
  if (variant == StepDpoVariant::kL1 && !right.empty()) margin = margin - stop_gradient(tape.sum(right));
  return pairwise_logistic_loss(margin, cfg.beta);
}

inline Var dpo_loss(Tape& tape, const ModelBundle& b, const PairedExample& pair, const LossConfig& cfg) {
  return step_dpo_loss(tape, b, pair, cfg, StepDpoVariant::kDpo);
}

/// ((Σ r(y+) - Σ r(y-)) - 1/(2β))².
inline Var ipo_loss(Tape& tape, const ModelBundle& b, const PairedExample& pair, const LossConfig& cfg) {
  const auto pos = log_ratios(tape, b, pair.prompt, pair.chosen.answer);
  const auto neg = log_ratios(tape, b, pair.prompt, pair.rejected.answer);
  const Var margin = tape.sum(pos) - tape.sum(neg);
  return square(margin - 1.0 / (2.0 * cfg.beta));
}

/// -c σ(F - z) - (1 - c) σ(z - F) with F = Σ_t r_t. The reference point is
/// passed through stop_gradient.
inline Var kto_loss(Tape& tape, const ModelBundle& b, const Example& e, Var z, const LossConfig&) {
  require(e.constant_labels(), "kto_loss needs answer-level labels");
  const auto r = log_ratios(tape, b, e.prompt, e.answer);
  const Var F = tape.sum(r);
  const Var zs = stop_gradient(z);
  return e.labels.front() ? -sigmoid(F - zs) : -sigmoid(zs - F);
}

inline Var kto_loss(Tape& tape, const ModelBundle& b, const Example& e, double z, const LossConfig& cfg) {
  return kto_loss(tape, b, e, tape.constant(z), cfg);
}

enum class StepKtoVariant { kOriginal, kL1 };

/// kOriginal: one σ term per step around z0. kL1: correct answers use the
/// KTO positive term; others use -σ(-Σ_{c=0} r - sg(Σ_{c=1} r) + z0).
inline Var step_kto_loss(Tape& tape, const ModelBundle& b, const Example& e, double z0, StepKtoVariant variant) {
  const auto r = log_ratios(tape, b, e.prompt, e.answer);
  const Var z = tape.constant(z0);
  if (variant == StepKtoVariant::kL1) {
    if (e.all_correct()) return -sigmoid(tape.sum(r) - z);
    std::vector<Var> wrong;
    std::vector<Var> right;
    for (std::size_t t = 0; t < r.size(); ++t) (e.labels[t] ? right : wrong).push_back(r[t]);
    Var arg = -tape.sum(wrong);
    if (!right.empty()) arg = arg - stop_gradient(tape.sum(right));
    return -sigmoid(arg + z);
  }
  const auto starts = e.steps();
  std::vector<Var> terms;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const auto begin = static_cast<std::size_t>(starts[k]);
    const std::size_t end = k + 1 < starts.size() ? static_cast<std::size_t>(starts[k + 1]) : r.size();
    const Var group = tape.sum(std::span<const Var>(r).subspan(begin, end - begin));
    terms.push_back(e.labels[begin] ? sigmoid(group - z) : sigmoid(z - group));
  }
  return -tape.sum(terms);
}

/// -log f(y | x) for correct answers, 0 otherwise.
inline Var sft_loss(Tape& tape, const ModelBundle& b, const Example& e) {
  if (!e.all_correct()) return tape.constant(0.0);
  const detail::TokenRows tr(b.shape(), e.prompt, e.answer);
  std::vector<Var> lp;
  for (std::size_t t = 0; t < e.answer.size(); ++t) lp.push_back(policy_log_prob(tape, b, tr.rows[t], e.answer[t]));
  return -tape.sum(lp);
}

inline Var combined(Var base, Var sft, double sft_coeff) {
  if (sft_coeff == 0.0) return base;
  return base + sft_coeff * sft;
}

/// Loss for one unpaired record. `z` is the KTO-family reference point for
/// this record's prompt (ignored by other kinds).
inline Var build_loss(Tape& tape, const ModelBundle& b, const Example& e, const LossConfig& cfg, double z = 0.0) {
  Var base;
  switch (cfg.kind) {
    case LossKind::kPipaM: base = pipa_m_loss(tape, b, e, cfg); break;
    case LossKind::kPipaN: base = pipa_n_loss(tape, b, e, cfg); break;
    case LossKind::kKto: base = kto_loss(tape, b, e, cfg.z0.value_or(z), cfg); break;
    case LossKind::kStepKto: base = step_kto_loss(tape, b, e, cfg.z0.value_or(z), StepKtoVariant::kOriginal); break;
    case LossKind::kStepKtoL1: base = step_kto_loss(tape, b, e, cfg.z0.value_or(z), StepKtoVariant::kL1); break;
    case LossKind::kSft: return sft_loss(tape, b, e);
    default: throw InvalidInput("loss '" + to_string(cfg.kind) + "' needs paired records");
  }
  if (cfg.sft_coeff == 0.0) return base;
  return combined(base, sft_loss(tape, b, e), cfg.sft_coeff);
}

inline Var build_loss(Tape& tape, const ModelBundle& b, const PairedExample& pair, const LossConfig& cfg) {
  Var base;
  switch (cfg.kind) {
    case LossKind::kDpo: base = dpo_loss(tape, b, pair, cfg); break;
    case LossKind::kIpo: base = ipo_loss(tape, b, pair, cfg); break;
    case LossKind::kStepDpoL0: base = step_dpo_loss(tape, b, pair, cfg, StepDpoVariant::kL0); break;
    case LossKind::kStepDpoL1: base = step_dpo_loss(tape, b, pair, cfg, StepDpoVariant::kL1); break;
    default: throw InvalidInput("loss '" + to_string(cfg.kind) + "' takes unpaired records");
  }
  if (cfg.sft_coeff == 0.0) return base;
  return combined(base, sft_loss(tape, b, pair.chosen), cfg.sft_coeff);
}

/// Reference point z(x) = KL(f(.|x) || p_prior(.|x)) per prompt in `batch`.
///
/// kExact enumerates all answers of the batch's answer length. kBatch pairs
/// record i's prompt with record (i+1 mod n)'s answer, averages Σ_t r_t per
/// prompt and clamps the mean at 0. Either way the result is a plain number
/// and carries no gradient.
inline std::map<int, double> estimate_kl_z(const ModelBundle& b, std::span<const Example> batch, ZMode mode,
                                           std::size_t budget = kDefaultEnumerationBudget) {
  std::map<int, double> z;
  if (batch.empty()) return z;
  const auto& s = b.shape();
  if (mode == ZMode::kExact) {
    for (const auto& e : batch) {
      const int pid = s.prompt_id(e.prompt);
      if (z.count(pid)) continue;
      z[pid] = sequence_kl(b.policy, b.prior, e.prompt, static_cast<int>(e.answer.size()), budget);
    }
    return z;
  }
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& other = batch[(i + 1) % batch.size()];
    const int pid = s.prompt_id(batch[i].prompt);
    const detail::TokenRows tr(s, batch[i].prompt, other.answer);
    double sum_r = 0.0;
    for (std::size_t t = 0; t < other.answer.size(); ++t) {
      sum_r += b.policy.token_logprob(tr.rows[t], other.answer[t]) - b.prior.token_logprob(tr.rows[t], other.answer[t]);
    }
    acc[pid].first += sum_r;
    acc[pid].second += 1;
  }
  for (const auto& [pid, a] : acc) z[pid] = std::max(0.0, a.first / a.second);
  return z;
}

}  // namespace pipa
