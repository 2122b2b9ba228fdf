#pragma once

// Tabular autoregressive models.
//
// A context key is (prompt id, last min(w, |prefix|) answer tokens). Keys are
// laid out per prompt as: the empty history, then all histories of length 1
// in lexicographic order, then length 2, ... up to min(w, T_max - 1). Prompts
// are single-token sequences whose token is the prompt id.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pipa/error.hpp"
#include "pipa/optim.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/tape.hpp"

namespace pipa {

inline constexpr std::size_t kMaxTableRows = 10'000'000;
inline constexpr std::size_t kDefaultEnumerationBudget = 1'000'000;

struct ModelShape {
  int vocab = 2;
  int max_len = 2;
  int window = 2;
  int prompts = 1;

  bool operator==(const ModelShape&) const = default;

  int history_len() const { return std::min(window, max_len - 1); }

  std::size_t rows_per_prompt() const {
    std::size_t rows = 0;
    std::size_t pow = 1;
    for (int l = 0; l <= history_len(); ++l) {
      rows += pow;
      pow *= static_cast<std::size_t>(vocab);
    }
    return rows;
  }

  std::size_t rows() const { return rows_per_prompt() * static_cast<std::size_t>(prompts); }

  void validate() const {
    require(vocab >= 2, "vocab size must be at least 2");
    require(max_len >= 1, "max answer length must be at least 1");
    require(window >= 0, "context window must be nonnegative");
    require(prompts >= 1, "at least one prompt required");
    double rows = 0.0;
    for (int l = 0; l <= history_len(); ++l) rows += std::pow(static_cast<double>(vocab), l);
    if (rows * prompts > static_cast<double>(kMaxTableRows)) {
      throw ResourceError("context table too large for (V, T_max, w)");
    }
  }

  int prompt_id(std::span<const int> prompt) const {
    if (prompt.size() != 1 || prompt[0] < 0 || prompt[0] >= prompts) {
      throw InvalidInput("unknown prompt id");
    }
    return prompt[0];
  }

  std::size_t row(int prompt, std::span<const int> prefix) const {
    if (static_cast<int>(prefix.size()) >= max_len) {
      throw InvalidInput("prefix length must be below the maximum answer length");
    }
    const std::size_t len = std::min(prefix.size(), static_cast<std::size_t>(std::max(window, 0)));
    std::size_t offset = 0;
    std::size_t pow = 1;
    for (std::size_t l = 0; l < len; ++l) {
      offset += pow;
      pow *= static_cast<std::size_t>(vocab);
    }
    std::size_t code = 0;
    for (std::size_t i = prefix.size() - len; i < prefix.size(); ++i) {
      const int tok = prefix[i];
      if (tok < 0 || tok >= vocab) throw InvalidInput("answer token out of vocabulary");
      code = code * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(tok);
    }
    return static_cast<std::size_t>(prompt) * rows_per_prompt() + offset + code;
  }

  std::size_t row(std::span<const int> prompt, std::span<const int> prefix) const {
    return row(prompt_id(prompt), prefix);
  }

  /// Inverse of row(): (prompt id, history tokens).
  std::pair<int, Tokens> key(std::size_t row_index) const {
    const std::size_t rpp = rows_per_prompt();
    const int prompt = static_cast<int>(row_index / rpp);
    std::size_t rem = row_index % rpp;
    std::size_t pow = 1;
    int len = 0;
    while (rem >= pow) {
      rem -= pow;
      pow *= static_cast<std::size_t>(vocab);
      ++len;
    }
    Tokens hist(static_cast<std::size_t>(len));
    for (int i = len - 1; i >= 0; --i) {
      hist[static_cast<std::size_t>(i)] = static_cast<int>(rem % static_cast<std::size_t>(vocab));
      rem /= static_cast<std::size_t>(vocab);
    }
    return {prompt, hist};
  }
};

inline std::vector<double> softmax(std::span<const double> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (double l : logits) m = std::max(m, l);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
  for (double& x : p) x /= z;
  return p;
}

inline double log_softmax_at(std::span<const double> logits, std::size_t j) {
  double m = -std::numeric_limits<double>::infinity();
  for (double l : logits) m = std::max(m, l);
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return logits[j] - m - std::log(z);
}

/// Softmax next-token table f(y_t | x, y_{<t}).
class TabularPolicy {
 public:
  TabularPolicy() = default;

  explicit TabularPolicy(ModelShape shape, bool frozen = false) : shape_(shape), frozen_(frozen) {
    shape_.validate();
    logits_.assign(shape_.rows() * static_cast<std::size_t>(shape_.vocab), 0.0);
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows(); }
  std::size_t size() const { return logits_.size(); }
  bool frozen() const { return frozen_; }

  std::span<const double> logits() const { return logits_; }

  std::span<double> mutable_logits() {
    if (frozen_) throw InvalidInput("frozen policy parameters are read-only");
    return logits_;
  }

  std::span<const double> row_logits(std::size_t row) const {
    return std::span<const double>(logits_).subspan(row * static_cast<std::size_t>(shape_.vocab),
                                                    static_cast<std::size_t>(shape_.vocab));
  }

  /// Sets a row to log-probabilities; zeros become -inf logits.
  void set_row_probabilities(std::size_t row, std::span<const double> probs) {
    require(probs.size() == static_cast<std::size_t>(shape_.vocab), "row size mismatch");
    auto dst = mutable_logits().subspan(row * static_cast<std::size_t>(shape_.vocab), probs.size());
    for (std::size_t j = 0; j < probs.size(); ++j) {
      dst[j] = probs[j] > 0.0 ? std::log(probs[j]) : -std::numeric_limits<double>::infinity();
    }
  }

  std::vector<double> next_token_dist(std::span<const int> prompt, std::span<const int> prefix) const {
    return softmax(row_logits(shape_.row(prompt, prefix)));
  }

  double token_logprob(std::size_t row, int token) const {
    if (token < 0 || token >= shape_.vocab) throw InvalidInput("answer token out of vocabulary");
    return log_softmax_at(row_logits(row), static_cast<std::size_t>(token));
  }

  double sequence_logprob(std::span<const int> prompt, std::span<const int> answer) const {
    require(!answer.empty(), "answer must be non-empty");
    require(static_cast<int>(answer.size()) <= shape_.max_len, "answer longer than T_max");
    const int pid = shape_.prompt_id(prompt);
    double lp = 0.0;
    for (std::size_t t = 0; t < answer.size(); ++t) {
      lp += token_logprob(shape_.row(pid, answer.subspan(0, t)), answer[t]);
    }
    return lp;
  }

  TabularPolicy frozen_copy() const {
    TabularPolicy out = *this;
    out.frozen_ = true;
    return out;
  }

  TabularPolicy trainable_copy() const {
    TabularPolicy out = *this;
    out.frozen_ = false;
    return out;
  }

  bool operator==(const TabularPolicy&) const = default;

 private:
  ModelShape shape_;
  std::vector<double> logits_;
  bool frozen_ = false;
};

/// Per-context correctness probability g = σ(raw).
class ValueTable {
 public:
  ValueTable() = default;
  explicit ValueTable(ModelShape shape) : shape_(shape) {
    shape_.validate();
    raw_.assign(shape_.rows(), 0.0);
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t size() const { return raw_.size(); }
  std::span<const double> raw() const { return raw_; }
  std::span<double> mutable_raw() { return raw_; }

  double value(std::size_t row) const { return sigmoid_value(raw_.at(row)); }
  double value(std::span<const int> prompt, std::span<const int> prefix) const {
    return value(shape_.row(prompt, prefix));
  }

  bool operator==(const ValueTable&) const = default;

 private:
  ModelShape shape_;
  std::vector<double> raw_;
};

/// Trainable f and g plus the frozen prior.
///
/// Flat parameter layout: policy logits (row-major, row * V + token), then
/// value raws. ParamIds on tapes index this layout.
struct ModelBundle {
  TabularPolicy policy;
  ValueTable value;
  TabularPolicy prior;

  static ModelBundle make(const TabularPolicy& init_policy, const TabularPolicy& prior) {
    ModelBundle b{init_policy.trainable_copy(), ValueTable(init_policy.shape()), prior.frozen_copy()};
    b.validate();
    return b;
  }

  void validate() const {
    require(policy.shape() == value.shape() && policy.shape() == prior.shape(),
            "bundle members must share (V, T_max, w, prompts)");
    require(prior.frozen(), "bundle prior must be frozen");
    require(!policy.frozen(), "bundle policy must be trainable");
  }

  const ModelShape& shape() const { return policy.shape(); }
  std::size_t num_params() const { return policy.size() + value.size(); }
  ParamId policy_param(std::size_t row, int token) const {
    return static_cast<ParamId>(row * static_cast<std::size_t>(shape().vocab) + static_cast<std::size_t>(token));
  }
  ParamId value_param(std::size_t row) const { return static_cast<ParamId>(policy.size() + row); }

  std::vector<double> parameters() const {
    std::vector<double> out(policy.logits().begin(), policy.logits().end());
    out.insert(out.end(), value.raw().begin(), value.raw().end());
    return out;
  }

  void set_parameters(std::span<const double> theta) {
    require(theta.size() == num_params(), "parameter vector size mismatch");
    auto l = policy.mutable_logits();
    std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(l.size()), l.begin());
    auto r = value.mutable_raw();
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(l.size()), theta.end(), r.begin());
  }
};

struct SequenceProb {
  Tokens answer;
  double prob;
};

/// All V^T answers of length T in lexicographic order with exact probabilities.
inline std::vector<SequenceProb> enumerate_sequences(const TabularPolicy& policy,
                                                     std::span<const int> prompt, int len,
                                                     std::size_t budget = kDefaultEnumerationBudget) {
  const auto& s = policy.shape();
  require(len >= 1 && len <= s.max_len, "enumeration length must lie in [1, T_max]");
  if (std::pow(static_cast<double>(s.vocab), len) > static_cast<double>(budget)) {
    throw ResourceError("enumeration budget exceeded: V^T > " + std::to_string(budget));
  }
  const int pid = s.prompt_id(prompt);
  std::vector<SequenceProb> out;
  Tokens cur;
  // Depth-first in token order gives lexicographic output.
  auto rec = [&](auto&& self, double p) -> void {
    if (static_cast<int>(cur.size()) == len) {
      out.push_back({cur, p});
      return;
    }
    const auto dist = softmax(policy.row_logits(s.row(pid, cur)));
    for (int v = 0; v < s.vocab; ++v) {
      cur.push_back(v);
      self(self, p * dist[static_cast<std::size_t>(v)]);
      cur.pop_back();
    }
  };
  rec(rec, 1.0);
  return out;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), "distribution size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += std::abs(p[i] - q[i]);
  return 0.5 * d;
}

/// KL(f(.|x) || g(.|x)) over fixed-length answers, by enumeration.
inline double sequence_kl(const TabularPolicy& f, const TabularPolicy& g, std::span<const int> prompt,
                          int len, std::size_t budget = kDefaultEnumerationBudget) {
  const auto a = enumerate_sequences(f, prompt, len, budget);
  double kl = 0.0;
  for (const auto& [y, p] : a) {
    if (p <= 0.0) continue;
    kl += p * (std::log(p) - g.sequence_logprob(prompt, y));
  }
  return std::max(kl, 0.0);
}

enum class SftSelector { kPositive, kAll, kNegative };

inline SftSelector parse_selector(const std::string& s) {
  if (s == "positive" || s == "positive-only") return SftSelector::kPositive;
  if (s == "all") return SftSelector::kAll;
  if (s == "negative" || s == "negative-only") return SftSelector::kNegative;
  throw InvalidInput("unknown SFT selector '" + s + "'");
}

/// Maximum-likelihood fit of next-token tables on the selected answers by
/// full-batch Adam ascent on the mean log-likelihood. Returns a frozen policy.
inline TabularPolicy fit_sft(const TabularPolicy& init, const Dataset& data, SftSelector selector,
                             int epochs, double lr) {
  require(epochs >= 0, "epochs must be nonnegative");
  require(lr >= 0.0, "lr must be nonnegative");
  const Dataset flat = as_unpaired(data);
  const auto& s = init.shape();
  const auto v = static_cast<std::size_t>(s.vocab);
  // Sufficient statistics: token counts per context row.
  std::vector<double> counts(init.size(), 0.0);
  std::vector<double> totals(init.rows(), 0.0);
  std::size_t selected = 0;
  for (const auto& e : flat.examples()) {
    const bool pos = e.all_correct();
    if ((selector == SftSelector::kPositive && !pos) || (selector == SftSelector::kNegative && pos)) continue;
    require(static_cast<int>(e.answer.size()) <= s.max_len, "answer longer than T_max");
    ++selected;
    const int pid = s.prompt_id(e.prompt);
    for (std::size_t t = 0; t < e.answer.size(); ++t) {
      const std::size_t r = s.row(pid, std::span<const int>(e.answer).subspan(0, t));
      const int tok = e.answer[t];
      require(tok >= 0 && tok < s.vocab, "answer token out of vocabulary");
      counts[r * v + static_cast<std::size_t>(tok)] += 1.0;
      totals[r] += 1.0;
    }
  }
  if (selected == 0) throw InvalidInput("fit_sft: selection is empty");

  TabularPolicy out = init.trainable_copy();
  auto theta = out.mutable_logits();
  Optimizer opt(OptimizerKind::kAdam, theta.size());
  std::vector<double> grad(theta.size(), 0.0);
  const double n = static_cast<double>(selected);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t r = 0; r < totals.size(); ++r) {
      if (totals[r] == 0.0) continue;
      const auto p = softmax(out.row_logits(r));
      for (std::size_t j = 0; j < v; ++j) grad[r * v + j] = -(counts[r * v + j] - totals[r] * p[j]) / n;
    }
    opt.step(theta, grad, lr);
  }
  return out.frozen_copy();
}

}  // namespace pipa
