#pragma once

// Records, datasets and the label transforms applied to them.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pipa/error.hpp"

namespace pipa {

using Tokens = std::vector<int>;
using Labels = std::vector<std::uint8_t>;

enum class Level { kAnswer, kStep };

inline std::string to_string(Level level) { return level == Level::kAnswer ? "answer" : "step"; }

inline Level parse_level(const std::string& s) {
  if (s == "answer") return Level::kAnswer;
  if (s == "step") return Level::kStep;
  throw InvalidInput("unknown level '" + s + "' (expected answer|step)");
}

/// Every token is its own step when `step_starts` is absent.
inline std::vector<int> default_step_starts(std::size_t len) {
  std::vector<int> s(len);
  for (std::size_t i = 0; i < len; ++i) s[i] = static_cast<int>(i);
  return s;
}

inline void validate_step_starts(std::span<const int> starts, std::size_t len) {
  require(!starts.empty(), "step_starts must not be empty");
  require(starts.front() == 0, "step_starts must begin at 0");
  for (std::size_t k = 1; k < starts.size(); ++k) {
    require(starts[k] > starts[k - 1], "step_starts must be strictly increasing");
  }
  require(starts.back() < static_cast<int>(len), "step_starts out of range for answer length");
}

/// One (prompt, answer, token-label) record.
struct Example {
  Tokens prompt;
  Tokens answer;
  Labels labels;
  std::optional<std::vector<int>> step_starts;
  std::optional<std::vector<double>> q_values;

  std::vector<int> steps() const {
    return step_starts ? *step_starts : default_step_starts(answer.size());
  }

  bool all_correct() const {
    return std::all_of(labels.begin(), labels.end(), [](auto c) { return c == 1; });
  }

  bool constant_labels() const {
    return std::adjacent_find(labels.begin(), labels.end(), std::not_equal_to<>()) == labels.end();
  }

  void validate() const {
    require(!answer.empty(), "answer must be non-empty");
    require(labels.size() == answer.size(), "labels length must equal answer length");
    for (auto c : labels) require(c <= 1, "labels must be 0/1");
    if (step_starts) validate_step_starts(*step_starts, answer.size());
    const auto s = steps();
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t end = k + 1 < s.size() ? static_cast<std::size_t>(s[k + 1]) : answer.size();
      for (std::size_t t = static_cast<std::size_t>(s[k]); t < end; ++t) {
        require(labels[t] == labels[static_cast<std::size_t>(s[k])],
                "labels must be constant within each step");
      }
    }
    if (q_values) require(q_values->size() == s.size(), "q_values must have one entry per step");
  }
};

struct PairedExample {
  Tokens prompt;
  Example chosen;
  Example rejected;

  void validate() const {
    chosen.validate();
    rejected.validate();
    require(chosen.all_correct(), "chosen answer labels must all be 1");
    require(chosen.prompt == prompt && rejected.prompt == prompt,
            "both halves of a pair must share the prompt");
  }
};

/// Homogeneous, immutable collection of records.
class Dataset {
 public:
  Dataset() = default;

  static Dataset unpaired(std::vector<Example> records, Level level) {
    Dataset d;
    d.level_ = level;
    d.examples_ = std::move(records);
    for (const auto& e : d.examples_) {
      e.validate();
      if (level == Level::kAnswer) require(e.constant_labels(), "answer-level records need constant labels");
    }
    return d;
  }

  static Dataset paired(std::vector<PairedExample> records, Level level) {
    Dataset d;
    d.level_ = level;
    d.paired_ = true;
    d.pairs_ = std::move(records);
    for (const auto& p : d.pairs_) {
      p.validate();
      if (level == Level::kAnswer) {
        require(p.rejected.constant_labels(), "answer-level records need constant labels");
      }
    }
    return d;
  }

  bool is_paired() const { return paired_; }
  Level level() const { return level_; }
  std::size_t size() const { return paired_ ? pairs_.size() : examples_.size(); }
  bool empty() const { return size() == 0; }

  const std::vector<Example>& examples() const {
    if (paired_) throw InvalidInput("dataset holds paired records");
    return examples_;
  }

  const std::vector<PairedExample>& pairs() const {
    if (!paired_) throw InvalidInput("dataset holds unpaired records");
    return pairs_;
  }

 private:
  Level level_ = Level::kAnswer;
  bool paired_ = false;
  std::vector<Example> examples_;
  std::vector<PairedExample> pairs_;
};

/// Chosen records first, then rejected records, each in input order.
inline Dataset decouple_pairs(const Dataset& paired) {
  if (!paired.is_paired()) throw InvalidInput("decouple_pairs: dataset is already unpaired");
  std::vector<Example> out;
  out.reserve(2 * paired.size());
  for (const auto& p : paired.pairs()) out.push_back(p.chosen);
  for (const auto& p : paired.pairs()) out.push_back(p.rejected);
  return Dataset::unpaired(std::move(out), paired.level());
}

/// Unpaired view of any dataset.
inline Dataset as_unpaired(const Dataset& d) { return d.is_paired() ? decouple_pairs(d) : d; }

/// Per prompt, min(#correct, #incorrect) pairs by seeded uniform matching.
/// Surplus answers of either class are dropped.
inline Dataset pair_by_problem(const Dataset& unpaired, std::uint64_t seed) {
  const auto& records = unpaired.examples();
  std::vector<Tokens> order;
  std::map<Tokens, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = groups.try_emplace(records[i].prompt);
    if (inserted) order.push_back(records[i].prompt);
    (records[i].all_correct() ? it->second.first : it->second.second).push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<PairedExample> pairs;
  for (const auto& prompt : order) {
    auto& [good, bad] = groups[prompt];
    std::shuffle(good.begin(), good.end(), rng);
    std::shuffle(bad.begin(), bad.end(), rng);
    const std::size_t n = std::min(good.size(), bad.size());
    for (std::size_t k = 0; k < n; ++k) {
      pairs.push_back(PairedExample{prompt, records[good[k]], records[bad[k]]});
    }
  }
  return Dataset::paired(std::move(pairs), unpaired.level());
}

/// Step labels from per-step Q values in [-1, 1]. Steps of a correct answer
/// are always correct; otherwise q >= threshold marks a step correct.
inline Labels labels_from_q(std::span<const double> q_values, bool answer_correct, double threshold) {
  require(threshold > -1.0 && threshold <= 1.0, "threshold must lie in (-1, 1]");
  Labels out(q_values.size());
  for (std::size_t k = 0; k < q_values.size(); ++k) {
    const double q = q_values[k];
    require(q >= -1.0 && q <= 1.0, "q value outside [-1, 1]");
    out[k] = answer_correct || q >= threshold ? 1 : 0;
  }
  return out;
}

/// Broadcast one label per step to the tokens of that step.
inline Labels expand_step_labels(std::span<const std::uint8_t> step_labels,
                                 std::span<const int> step_starts, std::size_t len) {
  validate_step_starts(step_starts, len);
  require(step_labels.size() == step_starts.size(), "one label per step required");
  Labels out(len);
  for (std::size_t k = 0; k < step_starts.size(); ++k) {
    const std::size_t end = k + 1 < step_starts.size() ? static_cast<std::size_t>(step_starts[k + 1]) : len;
    for (std::size_t t = static_cast<std::size_t>(step_starts[k]); t < end; ++t) out[t] = step_labels[k];
  }
  return out;
}

/// Label of the first token of each step.
inline Labels step_labels_of(const Example& e) {
  Labels out;
  for (int s : e.steps()) out.push_back(e.labels[static_cast<std::size_t>(s)]);
  return out;
}

/// Re-derives step labels from stored q_values. A record counts as a correct
/// answer when its current labels are all 1, so apply this once, to records
/// carrying ground-truth labels.
inline Dataset relabel_from_q(const Dataset& d, double threshold) {
  auto relabel = [&](Example e) {
    require(e.q_values.has_value(), "relabel_from_q: record has no q_values");
    const auto steps = e.steps();
    e.labels = expand_step_labels(labels_from_q(*e.q_values, e.all_correct(), threshold), steps,
                                  e.answer.size());
    if (!e.step_starts) e.step_starts = steps;
    return e;
  };
  if (d.is_paired()) {
    std::vector<PairedExample> out;
    for (const auto& p : d.pairs()) out.push_back({p.prompt, relabel(p.chosen), relabel(p.rejected)});
    return Dataset::paired(std::move(out), Level::kStep);
  }
  std::vector<Example> out;
  for (const auto& e : d.examples()) out.push_back(relabel(e));
  return Dataset::unpaired(std::move(out), Level::kStep);
}

}  // namespace pipa
