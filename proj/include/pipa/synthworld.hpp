#pragma once

// Synthetic ground-truth worlds p(x) p(c|x) p(y|x,c) with exact oracles.
//
// Correct answers are drawn from the positive policy. An incorrect answer
// first draws a changepoint k in {1..T} from the prompt's fault process; its
// tokens before position k follow the positive policy and tokens from k on
// follow the negative (post-fault) policy. Step labels mark positions < k as
// correct, so every incorrect answer goes wrong at least at its last token.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/models.hpp"
#include "pipa/seqdata.hpp"

namespace pipa {

struct WorldOptions {
  /// Dirichlet concentration of every next-token row.
  double alpha = 1.0;
  double class_prior_lo = 0.3;
  double class_prior_hi = 0.7;
  /// Fixed changepoint distribution over {1..T}; sampled per prompt when unset.
  std::optional<std::vector<double>> fault;
  double fault_alpha = 1.0;
};

struct World {
  int prompts = 1;
  int vocab = 2;
  int len = 1;
  std::vector<double> prompt_probs;
  std::vector<double> class_prior;           // p(c=1 | x)
  TabularPolicy positive;                    // p(y_t | x, y_<t, c=1)
  TabularPolicy negative;                    // post-fault token law
  std::vector<std::vector<double>> fault;    // fault[x][k-1] = p(k | x)

  ModelShape shape() const { return ModelShape{vocab, len, std::max(len - 1, 0), prompts}; }

  void validate() const {
    shape().validate();
    require(static_cast<int>(prompt_probs.size()) == prompts, "prompt distribution size mismatch");
    require(static_cast<int>(class_prior.size()) == prompts, "class prior size mismatch");
    require(static_cast<int>(fault.size()) == prompts, "fault process size mismatch");
    require(positive.shape() == shape() && negative.shape() == shape(), "world policies must share (V, T)");
    auto normalized = [](std::span<const double> p) {
      double s = 0.0;
      for (double x : p) {
        if (!(x >= 0.0)) return false;
        s += x;
      }
      return std::abs(s - 1.0) < 1e-12;
    };
    require(normalized(prompt_probs), "prompt distribution must be normalized");
    for (int x = 0; x < prompts; ++x) {
      require(class_prior[static_cast<std::size_t>(x)] >= 0.0 && class_prior[static_cast<std::size_t>(x)] <= 1.0,
              "class prior outside [0, 1]");
      require(static_cast<int>(fault[static_cast<std::size_t>(x)].size()) == len, "fault process needs T entries");
      require(normalized(fault[static_cast<std::size_t>(x)]), "fault process must be normalized");
    }
  }

  /// Per-token probabilities of `y` under the positive and negative policies.
  std::pair<std::vector<double>, std::vector<double>> token_probs(int x, std::span<const int> y) const {
    std::vector<double> a(y.size());
    std::vector<double> b(y.size());
    const auto s = shape();
    for (std::size_t t = 0; t < y.size(); ++t) {
      const std::size_t r = s.row(x, y.subspan(0, t));
      a[t] = std::exp(positive.token_logprob(r, y[t]));
      b[t] = std::exp(negative.token_logprob(r, y[t]));
    }
    return {a, b};
  }

  /// p(y_{1..m} | x, c=1) for the prefix y (m = |y|).
  double positive_prefix(int x, std::span<const int> y) const {
    double p = 1.0;
    for (double v : token_probs(x, y).first) p *= v;
    return p;
  }

  /// p(y_{1..m} | x, c=0), summed over changepoints.
  double negative_prefix(int x, std::span<const int> y) const {
    const auto [a, b] = token_probs(x, y);
    double total = 0.0;
    for (int k = 1; k <= len; ++k) {
      double p = 1.0;
      for (std::size_t s = 0; s < y.size(); ++s) p *= static_cast<int>(s) + 1 < k ? a[s] : b[s];
      total += fault[static_cast<std::size_t>(x)][static_cast<std::size_t>(k - 1)] * p;
    }
    return total;
  }

  double marginal_prefix(int x, std::span<const int> y) const {
    const double rho = class_prior[static_cast<std::size_t>(x)];
    return rho * positive_prefix(x, y) + (1.0 - rho) * negative_prefix(x, y);
  }

  /// p(k > t | x): mass of changepoints after position t.
  double fault_after(int x, int t) const {
    double m = 0.0;
    for (int k = t + 1; k <= len; ++k) m += fault[static_cast<std::size_t>(x)][static_cast<std::size_t>(k - 1)];
    return m;
  }

  /// Mean fraction of incorrect-answer tokens that precede the changepoint.
  double correct_prefix_mass() const {
    double m = 0.0;
    for (int x = 0; x < prompts; ++x) {
      double e = 0.0;
      for (int k = 1; k <= len; ++k) {
        e += fault[static_cast<std::size_t>(x)][static_cast<std::size_t>(k - 1)] * (k - 1) / static_cast<double>(len);
      }
      m += prompt_probs[static_cast<std::size_t>(x)] * e;
    }
    return m;
  }
};

namespace detail {

inline double canonical(std::mt19937_64& rng) { return std::generate_canonical<double, 53>(rng); }

inline std::size_t draw(std::mt19937_64& rng, std::span<const double> probs) {
  const double u = canonical(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

inline std::vector<double> dirichlet(std::mt19937_64& rng, std::size_t n, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> out(n);
  double s = 0.0;
  for (double& v : out) s += (v = std::max(gamma(rng), 1e-12));
  for (double& v : out) v /= s;
  return out;
}

}  // namespace detail

/// Seeded random world; every row and distribution is Dirichlet-drawn.
inline World make_world(std::uint64_t seed, int prompts, int vocab, int len, const WorldOptions& opt = {},
                        std::size_t budget = kDefaultEnumerationBudget) {
  require(prompts >= 1 && vocab >= 2 && len >= 1, "world sizes must be positive (V >= 2)");
  if (std::pow(static_cast<double>(vocab), len) > static_cast<double>(budget)) {
    throw ResourceError("world exceeds the enumeration budget: V^T > " + std::to_string(budget));
  }
  require(opt.alpha > 0.0 && opt.fault_alpha > 0.0, "Dirichlet concentrations must be positive");
  require(opt.class_prior_lo >= 0.0 && opt.class_prior_lo <= opt.class_prior_hi && opt.class_prior_hi <= 1.0,
          "class prior range must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  World w;
  w.prompts = prompts;
  w.vocab = vocab;
  w.len = len;
  const ModelShape shape = w.shape();
  w.prompt_probs = detail::dirichlet(rng, static_cast<std::size_t>(prompts), 4.0);
  for (int x = 0; x < prompts; ++x) {
    w.class_prior.push_back(opt.class_prior_lo + (opt.class_prior_hi - opt.class_prior_lo) * detail::canonical(rng));
  }
  w.positive = TabularPolicy(shape);
  w.negative = TabularPolicy(shape);
  for (std::size_t r = 0; r < shape.rows(); ++r) {
    w.positive.set_row_probabilities(r, detail::dirichlet(rng, static_cast<std::size_t>(vocab), opt.alpha));
    w.negative.set_row_probabilities(r, detail::dirichlet(rng, static_cast<std::size_t>(vocab), opt.alpha));
  }
  for (int x = 0; x < prompts; ++x) {
    if (opt.fault) {
      require(static_cast<int>(opt.fault->size()) == len, "fault distribution needs T entries");
      std::vector<double> f = *opt.fault;
      double s = 0.0;
      for (double v : f) s += v;
      require(s > 0.0, "fault distribution must have positive mass");
      for (double& v : f) v /= s;
      w.fault.push_back(f);
    } else {
      w.fault.push_back(detail::dirichlet(rng, static_cast<std::size_t>(len), opt.fault_alpha));
    }
  }
  w.positive = w.positive.frozen_copy();
  w.negative = w.negative.frozen_copy();
  w.validate();
  return w;
}

/// p(c=1 | x, y) for a full answer.
inline double exact_posterior(const World& w, int x, std::span<const int> y) {
  require(static_cast<int>(y.size()) == w.len, "answer length must equal the world's T");
  const double rho = w.class_prior[static_cast<std::size_t>(x)];
  const double pos = rho * w.positive_prefix(x, y);
  const double total = pos + (1.0 - rho) * w.negative_prefix(x, y);
  if (!(total > 0.0)) throw DomainError("posterior undefined: (x, y) has zero probability");
  return pos / total;
}

/// p(c_t = 1 | x, y_{1..t}) under the given label semantics (t in 1..T).
inline double exact_token_posterior(const World& w, int x, std::span<const int> y, int t, Level level = Level::kStep) {
  require(t >= 1 && t <= w.len && static_cast<int>(y.size()) >= t, "token position out of range");
  const auto prefix = y.subspan(0, static_cast<std::size_t>(t));
  const double rho = w.class_prior[static_cast<std::size_t>(x)];
  const double pos = w.positive_prefix(x, prefix);
  const double total = rho * pos + (1.0 - rho) * w.negative_prefix(x, prefix);
  if (!(total > 0.0)) throw DomainError("posterior undefined: prefix has zero probability");
  const double on_track = level == Level::kStep ? rho + (1.0 - rho) * w.fault_after(x, t) : rho;
  return on_track * pos / total;
}

/// p(c_t = 1 | x, y_{<t}) with t = |prefix| + 1: the target of the value table.
inline double exact_value_target(const World& w, int x, std::span<const int> prefix, Level level = Level::kStep) {
  const int t = static_cast<int>(prefix.size()) + 1;
  require(t <= w.len, "prefix must be shorter than T");
  const double rho = w.class_prior[static_cast<std::size_t>(x)];
  const double pos = w.positive_prefix(x, prefix);
  const double total = rho * pos + (1.0 - rho) * w.negative_prefix(x, prefix);
  if (!(total > 0.0)) throw DomainError("posterior undefined: prefix has zero probability");
  const double on_track = level == Level::kStep ? rho + (1.0 - rho) * w.fault_after(x, t) : rho;
  return on_track * pos / total;
}

enum class WorldLaw { kPositive, kNegative, kMarginal };

/// Exact next-token conditionals of one of the world's answer laws, as a
/// frozen policy of the given context window (must cover the full history).
inline TabularPolicy world_policy(const World& w, WorldLaw law, int window) {
  require(window >= w.len - 1, "context window too short to represent the world exactly");
  const ModelShape shape{w.vocab, w.len, window, w.prompts};
  TabularPolicy out(shape);
  auto joint = [&](int x, std::span<const int> y) {
    switch (law) {
      case WorldLaw::kPositive: return w.positive_prefix(x, y);
      case WorldLaw::kNegative: return w.negative_prefix(x, y);
      case WorldLaw::kMarginal: return w.marginal_prefix(x, y);
    }
    return 0.0;
  };
  for (std::size_t r = 0; r < shape.rows(); ++r) {
    auto [x, hist] = shape.key(r);
    const double base = joint(x, hist);
    std::vector<double> probs(static_cast<std::size_t>(w.vocab), 1.0 / w.vocab);
    if (base > 0.0) {
      Tokens y = hist;
      y.push_back(0);
      for (int v = 0; v < w.vocab; ++v) {
        y.back() = v;
        probs[static_cast<std::size_t>(v)] = joint(x, y) / base;
      }
    }
    out.set_row_probabilities(r, probs);
  }
  return out.frozen_copy();
}

/// p(y | x, c) over all answers in lexicographic order.
inline std::vector<double> world_answer_distribution(const World& w, int x, bool correct) {
  std::vector<double> out;
  Tokens y(static_cast<std::size_t>(w.len), 0);
  const std::size_t n = static_cast<std::size_t>(std::pow(w.vocab, w.len));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = i;
    for (int t = w.len - 1; t >= 0; --t) {
      y[static_cast<std::size_t>(t)] = static_cast<int>(c % static_cast<std::size_t>(w.vocab));
      c /= static_cast<std::size_t>(w.vocab);
    }
    out.push_back(correct ? w.positive_prefix(x, y) : w.negative_prefix(x, y));
  }
  return out;
}

/// I.i.d. records. Step level attaches step_starts (one token per step) and
/// q_values = 2 p(c_t=1 | x, y_{<=t}) - 1 for every step.
inline Dataset sample_dataset(const World& w, std::size_t n, Level level, std::uint64_t seed) {
  require(n >= 1, "sample size must be at least 1");
  std::mt19937_64 rng(seed);
  const ModelShape s = w.shape();
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int x = static_cast<int>(detail::draw(rng, w.prompt_probs));
    const bool correct = detail::canonical(rng) < w.class_prior[static_cast<std::size_t>(x)];
    int k = w.len + 1;
    if (!correct) k = static_cast<int>(detail::draw(rng, w.fault[static_cast<std::size_t>(x)])) + 1;
    Example e;
    e.prompt = {x};
    for (int t = 1; t <= w.len; ++t) {
      const TabularPolicy& pol = t < k ? w.positive : w.negative;
      const auto dist = softmax(pol.row_logits(s.row(x, e.answer)));
      e.answer.push_back(static_cast<int>(detail::draw(rng, dist)));
    }
    if (level == Level::kAnswer) {
      e.labels.assign(e.answer.size(), correct ? 1 : 0);
    } else {
      for (int t = 1; t <= w.len; ++t) e.labels.push_back(t < k ? 1 : 0);
      e.step_starts = default_step_starts(e.answer.size());
      std::vector<double> q;
      for (int t = 1; t <= w.len; ++t) {
        q.push_back(std::clamp(2.0 * exact_token_posterior(w, x, e.answer, t, Level::kStep) - 1.0, -1.0, 1.0));
      }
      e.q_values = q;
    }
    out.push_back(std::move(e));
  }
  return Dataset::unpaired(std::move(out), level);
}

}  // namespace pipa
