#pragma once

// Shared fixtures and brute-force oracles for the test suites. Nothing here
// calls into the code paths it is used to check.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <type_traits>
#include <vector>

#include "pipa/losses.hpp"
#include "pipa/models.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/synthworld.hpp"

namespace pipa::testing {

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// V=2, T=1 bundle where the answer token 1 has f, g and p as given.
inline ModelBundle one_token_bundle(double f, double g, double p) {
  const ModelShape s{2, 1, 0, 1};
  TabularPolicy pol(s);
  TabularPolicy prior(s);
  const std::vector<double> fp{1.0 - f, f};
  const std::vector<double> pp{1.0 - p, p};
  pol.set_row_probabilities(0, fp);
  prior.set_row_probabilities(0, pp);
  ModelBundle b = ModelBundle::make(pol, prior);
  b.value.mutable_raw()[0] = logit(g);
  return b;
}

inline Example one_token_example(std::uint8_t label) { return Example{{0}, {1}, {label}, std::nullopt, std::nullopt}; }

inline ModelBundle random_bundle(std::mt19937_64& rng, ModelShape s, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  TabularPolicy pol(s);
  TabularPolicy prior(s);
  for (double& v : pol.mutable_logits()) v = nd(rng);
  for (double& v : prior.mutable_logits()) v = nd(rng);
  ModelBundle b = ModelBundle::make(pol, prior);
  for (double& v : b.value.mutable_raw()) v = nd(rng);
  return b;
}

inline Tokens random_answer(std::mt19937_64& rng, const ModelShape& s, int len) {
  std::uniform_int_distribution<int> tok(0, s.vocab - 1);
  Tokens y(static_cast<std::size_t>(len));
  for (int& v : y) v = tok(rng);
  return y;
}

/// Random record with per-token steps and a changepoint-style label vector.
inline Example random_example(std::mt19937_64& rng, const ModelShape& s, bool answer_level) {
  std::uniform_int_distribution<int> pr(0, s.prompts - 1);
  std::uniform_int_distribution<int> cut(0, s.max_len);
  Example e;
  e.prompt = {pr(rng)};
  e.answer = random_answer(rng, s, s.max_len);
  if (answer_level) {
    e.labels.assign(e.answer.size(), static_cast<std::uint8_t>(rng() % 2));
  } else {
    const int k = cut(rng);
    for (int t = 0; t < s.max_len; ++t) e.labels.push_back(t < k ? 1 : 0);
    e.step_starts = default_step_starts(e.answer.size());
  }
  return e;
}

inline PairedExample random_pair(std::mt19937_64& rng, const ModelShape& s) {
  Example neg = random_example(rng, s, false);
  Example pos{neg.prompt, random_answer(rng, s, s.max_len), Labels(static_cast<std::size_t>(s.max_len), 1),
              default_step_starts(static_cast<std::size_t>(s.max_len)), std::nullopt};
  return PairedExample{neg.prompt, pos, neg};
}

/// Sequence probability by explicit product of softmax entries.
inline double brute_sequence_prob(const TabularPolicy& pol, int prompt, const Tokens& y) {
  const auto& s = pol.shape();
  double p = 1.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const Tokens prefix(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t));
    const auto row = pol.row_logits(s.row(prompt, prefix));
    double z = 0.0;
    for (double l : row) z += std::exp(l);
    p *= std::exp(row[static_cast<std::size_t>(y[t])]) / z;
  }
  return p;
}

/// All answers of length T, lexicographic.
inline std::vector<Tokens> all_answers(int vocab, int len) {
  std::vector<Tokens> out;
  Tokens y(static_cast<std::size_t>(len), 0);
  while (true) {
    out.push_back(y);
    int t = len - 1;
    while (t >= 0 && y[static_cast<std::size_t>(t)] == vocab - 1) y[static_cast<std::size_t>(t--)] = 0;
    if (t < 0) break;
    ++y[static_cast<std::size_t>(t)];
  }
  return out;
}

/// Joint p(y, k | x, c=0) by direct simulation of the changepoint law.
inline double brute_negative_joint(const World& w, int x, const Tokens& y, int k) {
  const ModelShape s = w.shape();
  double p = w.fault[static_cast<std::size_t>(x)][static_cast<std::size_t>(k - 1)];
  for (std::size_t t = 0; t < y.size(); ++t) {
    const Tokens prefix(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t));
    const TabularPolicy& pol = static_cast<int>(t) + 1 < k ? w.positive : w.negative;
    p *= std::exp(pol.token_logprob(s.row(x, prefix), y[t]));
  }
  return p;
}

inline double brute_positive_joint(const World& w, int x, const Tokens& y) {
  const ModelShape s = w.shape();
  double p = 1.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const Tokens prefix(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t));
    p *= std::exp(w.positive.token_logprob(s.row(x, prefix), y[t]));
  }
  return p;
}

/// p(c_t = 1 | x, y_{1..t}) (step semantics) by summing the full joint over
/// every completion of the prefix, both classes and every changepoint.
inline double brute_token_posterior(const World& w, int x, const Tokens& y, int t) {
  const double rho = w.class_prior[static_cast<std::size_t>(x)];
  double num = 0.0;
  double den = 0.0;
  for (const Tokens& full : all_answers(w.vocab, w.len)) {
    if (!std::equal(y.begin(), y.begin() + t, full.begin())) continue;
    const double pos = rho * brute_positive_joint(w, x, full);
    num += pos;
    den += pos;
    for (int k = 1; k <= w.len; ++k) {
      const double neg = (1.0 - rho) * brute_negative_joint(w, x, full, k);
      den += neg;
      if (k > t) num += neg;
    }
  }
  return num / den;
}

/// Empirical p(y | x, c=1) from counts of correct records (lexicographic
/// order over all answers), and the mean TV to the world's law.
inline double count_mle_tv(const World& w, const Dataset& d) {
  const auto answers = all_answers(w.vocab, w.len);
  std::map<int, std::map<Tokens, double>> counts;
  std::map<int, double> totals;
  for (const auto& e : d.examples()) {
    if (!e.all_correct()) continue;
    counts[e.prompt[0]][e.answer] += 1.0;
    totals[e.prompt[0]] += 1.0;
  }
  double tv = 0.0;
  for (int x = 0; x < w.prompts; ++x) {
    const auto truth = world_answer_distribution(w, x, true);
    double d_x = 0.0;
    for (std::size_t i = 0; i < answers.size(); ++i) {
      const double emp = totals[x] > 0 ? counts[x][answers[i]] / totals[x] : 1.0 / answers.size();
      d_x += std::abs(emp - truth[i]);
    }
    tv += 0.5 * d_x;
  }
  return tv / w.prompts;
}

/// check_gradient over the full flat parameter vector of `b` for one record.
template <class Record>
double loss_gradient_error(const ModelBundle& b, const Record& rec, const LossConfig& cfg, double z = 0.0,
                           double eps = 1e-5) {
  const std::vector<double> theta = b.parameters();
  auto build = [&](Tape& t, std::span<const double> th) {
    ModelBundle m = b;
    m.set_parameters(th);
    for (std::size_t i = 0; i < th.size(); ++i) t.param(static_cast<ParamId>(i), th[i]);
    if constexpr (std::is_same_v<Record, PairedExample>) {
      return build_loss(t, m, rec, cfg);
    } else {
      return build_loss(t, m, rec, cfg, z);
    }
  };
  return check_gradient(build, theta, eps);
}

inline std::set<std::size_t> rows_of(const ModelShape& s, const Example& e, int label) {
  std::set<std::size_t> out;
  for (std::size_t t = 0; t < e.answer.size(); ++t) {
    if (label < 0 || e.labels[t] == label) {
      out.insert(s.row(e.prompt, std::span<const int>(e.answer).subspan(0, t)));
    }
  }
  return out;
}

/// Policy ParamIds whose rows are used only by correct-labelled tokens of the
/// negative answer (and by nothing else in the record).
inline std::vector<ParamId> sg_only_params(const ModelBundle& b, const Example& neg, const Example* pos) {
  const auto& s = b.shape();
  std::set<std::size_t> other = rows_of(s, neg, 0);
  if (pos) {
    for (auto r : rows_of(s, *pos, -1)) other.insert(r);
  }
  std::vector<ParamId> out;
  for (auto r : rows_of(s, neg, 1)) {
    if (other.count(r)) continue;
    for (int v = 0; v < s.vocab; ++v) out.push_back(b.policy_param(r, v));
  }
  return out;
}

}  // namespace pipa::testing
