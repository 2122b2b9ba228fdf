#pragma once

// Dataset JSONL files, text checkpoints for policies/bundles, and world files.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pipa/error.hpp"
#include "pipa/models.hpp"
#include "pipa/seqdata.hpp"
#include "pipa/synthworld.hpp"

namespace pipa {

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ResourceError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw ResourceError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------- datasets

namespace detail {

inline nlohmann::json example_json(const Example& e, std::optional<std::size_t> pair_id) {
  nlohmann::json j;
  j["prompt"] = e.prompt;
  j["answer"] = e.answer;
  std::vector<int> labels(e.labels.begin(), e.labels.end());
  j["labels"] = labels;
  if (e.step_starts) j["step_starts"] = *e.step_starts;
  if (e.q_values) j["q_values"] = *e.q_values;
  j["pair_id"] = pair_id ? nlohmann::json(*pair_id) : nlohmann::json(nullptr);
  return j;
}

template <class T>
std::vector<T> int_array(const nlohmann::json& j, const char* field, std::size_t line) {
  if (!j.contains(field) || !j[field].is_array()) {
    throw InvalidInput("line " + std::to_string(line) + ": field '" + field + "' must be an array");
  }
  std::vector<T> out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer()) {
      throw InvalidInput("line " + std::to_string(line) + ": field '" + field + "' must hold integers");
    }
    out.push_back(static_cast<T>(v.get<long long>()));
  }
  return out;
}

}  // namespace detail

/// One record per line. Paired datasets write chosen then rejected, both
/// carrying the pair's index in pair_id.
inline std::string dataset_to_jsonl(const Dataset& d) {
  std::string out;
  if (d.is_paired()) {
    for (std::size_t i = 0; i < d.pairs().size(); ++i) {
      out += detail::example_json(d.pairs()[i].chosen, i).dump() + '\n';
      out += detail::example_json(d.pairs()[i].rejected, i).dump() + '\n';
    }
  } else {
    for (const auto& e : d.examples()) out += detail::example_json(e, std::nullopt).dump() + '\n';
  }
  return out;
}

/// Level is step when any record carries step_starts; the file is paired
/// when any record has a non-null pair_id.
inline Dataset dataset_from_jsonl(const std::string& text) {
  std::vector<Example> records;
  std::vector<std::optional<long long>> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool step = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidInput("line " + std::to_string(lineno) + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InvalidInput("line " + std::to_string(lineno) + ": record must be an object");
    Example e;
    e.prompt = detail::int_array<int>(j, "prompt", lineno);
    e.answer = detail::int_array<int>(j, "answer", lineno);
    for (int c : detail::int_array<int>(j, "labels", lineno)) {
      if (c != 0 && c != 1) throw InvalidInput("line " + std::to_string(lineno) + ": labels must be 0 or 1");
      e.labels.push_back(static_cast<std::uint8_t>(c));
    }
    if (j.contains("step_starts") && !j["step_starts"].is_null()) {
      e.step_starts = detail::int_array<int>(j, "step_starts", lineno);
      step = true;
    }
    if (j.contains("q_values") && !j["q_values"].is_null()) {
      if (!j["q_values"].is_array()) throw InvalidInput("line " + std::to_string(lineno) + ": q_values must be an array");
      std::vector<double> q;
      for (const auto& v : j["q_values"]) {
        if (!v.is_number()) throw InvalidInput("line " + std::to_string(lineno) + ": q_values must be numbers");
        q.push_back(v.get<double>());
      }
      e.q_values = q;
    }
    std::optional<long long> id;
    if (j.contains("pair_id") && !j["pair_id"].is_null()) {
      if (!j["pair_id"].is_number_integer()) throw InvalidInput("line " + std::to_string(lineno) + ": bad pair_id");
      id = j["pair_id"].get<long long>();
    }
    try {
      e.validate();
    } catch (const InvalidInput& err) {
      throw InvalidInput("line " + std::to_string(lineno) + ": " + err.what());
    }
    records.push_back(std::move(e));
    ids.push_back(id);
  }
  const Level level = step ? Level::kStep : Level::kAnswer;
  bool paired = false;
  for (const auto& id : ids) paired = paired || id.has_value();
  if (!paired) return Dataset::unpaired(std::move(records), level);

  std::vector<PairedExample> pairs;
  for (std::size_t i = 0; i < records.size(); i += 2) {
    if (i + 1 >= records.size() || !ids[i] || ids[i] != ids[i + 1]) {
      throw InvalidInput("paired file: record " + std::to_string(i + 1) + " has no matching rejected record");
    }
    pairs.push_back(PairedExample{records[i].prompt, records[i], records[i + 1]});
  }
  return Dataset::paired(std::move(pairs), level);
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) { write_text(path, dataset_to_jsonl(d)); }
inline Dataset load_dataset(const std::filesystem::path& path) { return dataset_from_jsonl(read_text(path)); }

// ------------------------------------------------------------- checkpoints

namespace detail {

inline std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_real(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InvalidInput("checkpoint: bad number '" + s + "'");
  }
  if (used != s.size() || std::isnan(v)) throw InvalidInput("checkpoint: bad number '" + s + "'");
  return v;
}

inline std::string shape_header(const ModelShape& s, bool frozen) {
  std::ostringstream os;
  os << "vocab " << s.vocab << " max_len " << s.max_len << " window " << s.window << " prompts " << s.prompts
     << " frozen " << (frozen ? 1 : 0);
  return os.str();
}

inline std::pair<ModelShape, bool> parse_shape_header(const std::string& line) {
  std::istringstream in(line);
  std::map<std::string, int> kv;
  std::string key;
  int val = 0;
  while (in >> key >> val) kv[key] = val;
  for (const char* k : {"vocab", "max_len", "window", "prompts", "frozen"}) {
    if (!kv.count(k)) throw InvalidInput(std::string("checkpoint header missing '") + k + "'");
  }
  ModelShape s{kv["vocab"], kv["max_len"], kv["window"], kv["prompts"]};
  s.validate();
  return {s, kv["frozen"] != 0};
}

inline std::string row_key(const ModelShape& s, std::size_t r) {
  const auto [x, hist] = s.key(r);
  std::ostringstream os;
  os << "row " << x;
  for (int t : hist) os << ' ' << t;
  return os.str();
}

/// Reads `rows` lines of "row <prompt> <hist...> | v1 v2 ..." into a flat table.
inline std::vector<double> read_rows(std::istream& in, const ModelShape& s, std::size_t width) {
  std::vector<double> out(s.rows() * width, 0.0);
  std::vector<bool> seen(s.rows(), false);
  std::string line;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    if (!std::getline(in, line)) throw InvalidInput("checkpoint truncated: expected " + std::to_string(s.rows()) + " rows");
    const auto bar = line.find('|');
    if (bar == std::string::npos) throw InvalidInput("checkpoint row without '|': " + line);
    std::istringstream head(line.substr(0, bar));
    std::string tag;
    head >> tag;
    if (tag != "row") throw InvalidInput("checkpoint: expected 'row', got '" + tag + "'");
    int x = 0;
    if (!(head >> x) || x < 0 || x >= s.prompts) throw InvalidInput("checkpoint: bad prompt id in: " + line);
    Tokens hist;
    int t = 0;
    while (head >> t) hist.push_back(t);
    if (static_cast<int>(hist.size()) > s.history_len()) throw InvalidInput("checkpoint: history too long: " + line);
    const std::size_t r = s.row(x, hist);
    if (hist.size() < static_cast<std::size_t>(s.history_len()) && s.key(r).second.size() != hist.size()) {
      throw InvalidInput("checkpoint: bad history in: " + line);
    }
    if (seen[r]) throw InvalidInput("checkpoint: duplicate row: " + line);
    seen[r] = true;
    std::istringstream vals(line.substr(bar + 1));
    std::string tok;
    std::size_t j = 0;
    while (vals >> tok) {
      if (j >= width) throw InvalidInput("checkpoint: too many values in: " + line);
      out[r * width + j++] = parse_real(tok);
    }
    if (j != width) throw InvalidInput("checkpoint: too few values in: " + line);
  }
  return out;
}

inline std::string expect_line(std::istream& in, const std::string& what) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) return line;
  }
  throw InvalidInput("checkpoint truncated: expected " + what);
}

}  // namespace detail

inline void write_policy(std::ostream& os, const TabularPolicy& p) {
  const auto& s = p.shape();
  os << "pipa-policy v1\n" << detail::shape_header(s, p.frozen()) << '\n';
  for (std::size_t r = 0; r < s.rows(); ++r) {
    os << detail::row_key(s, r) << " |";
    for (double v : p.row_logits(r)) os << ' ' << detail::fmt(v);
    os << '\n';
  }
}

inline TabularPolicy read_policy(std::istream& in) {
  if (detail::expect_line(in, "policy magic") != "pipa-policy v1") throw InvalidInput("not a policy checkpoint");
  const auto [shape, frozen] = detail::parse_shape_header(detail::expect_line(in, "policy header"));
  TabularPolicy p(shape);
  const auto table = detail::read_rows(in, shape, static_cast<std::size_t>(shape.vocab));
  auto dst = p.mutable_logits();
  std::copy(table.begin(), table.end(), dst.begin());
  return frozen ? p.frozen_copy() : p;
}

inline void write_value(std::ostream& os, const ValueTable& v) {
  const auto& s = v.shape();
  os << "pipa-value v1\n" << detail::shape_header(s, false) << '\n';
  for (std::size_t r = 0; r < s.rows(); ++r) os << detail::row_key(s, r) << " | " << detail::fmt(v.raw()[r]) << '\n';
}

inline ValueTable read_value(std::istream& in) {
  if (detail::expect_line(in, "value magic") != "pipa-value v1") throw InvalidInput("not a value checkpoint");
  const auto [shape, frozen] = detail::parse_shape_header(detail::expect_line(in, "value header"));
  (void)frozen;
  ValueTable v(shape);
  const auto table = detail::read_rows(in, shape, 1);
  std::copy(table.begin(), table.end(), v.mutable_raw().begin());
  return v;
}

inline std::string bundle_to_text(const ModelBundle& b) {
  std::ostringstream os;
  os << "[policy]\n";
  write_policy(os, b.policy);
  os << "[value]\n";
  write_value(os, b.value);
  os << "[prior]\n";
  write_policy(os, b.prior);
  return os.str();
}

inline ModelBundle bundle_from_text(const std::string& text) {
  std::istringstream in(text);
  auto section = [&](const char* name) {
    if (detail::expect_line(in, name) != std::string("[") + name + "]") {
      throw InvalidInput(std::string("bundle checkpoint: expected section [") + name + "]");
    }
  };
  ModelBundle b;
  section("policy");
  b.policy = read_policy(in);
  section("value");
  b.value = read_value(in);
  section("prior");
  b.prior = read_policy(in);
  b.validate();
  return b;
}

inline void save_bundle(const std::filesystem::path& path, const ModelBundle& b) { write_text(path, bundle_to_text(b)); }
inline ModelBundle load_bundle(const std::filesystem::path& path) { return bundle_from_text(read_text(path)); }

// ------------------------------------------------------------------ worlds

inline std::string world_to_text(const World& w) {
  std::ostringstream os;
  os << "pipa-world v1\n";
  os << "prompts " << w.prompts << " vocab " << w.vocab << " len " << w.len << '\n';
  os << "prompt_probs";
  for (double p : w.prompt_probs) os << ' ' << detail::fmt(p);
  os << "\nclass_prior";
  for (double p : w.class_prior) os << ' ' << detail::fmt(p);
  os << '\n';
  for (int x = 0; x < w.prompts; ++x) {
    os << "fault " << x;
    for (double p : w.fault[static_cast<std::size_t>(x)]) os << ' ' << detail::fmt(p);
    os << '\n';
  }
  os << "[positive]\n";
  write_policy(os, w.positive);
  os << "[negative]\n";
  write_policy(os, w.negative);
  return os.str();
}

inline World world_from_text(const std::string& text) {
  std::istringstream in(text);
  if (detail::expect_line(in, "world magic") != "pipa-world v1") throw InvalidInput("not a world file");
  World w;
  {
    std::istringstream hdr(detail::expect_line(in, "world sizes"));
    std::string a, b, c;
    if (!(hdr >> a >> w.prompts >> b >> w.vocab >> c >> w.len) || a != "prompts" || b != "vocab" || c != "len") {
      throw InvalidInput("world file: bad size line");
    }
  }
  auto reals = [&](const std::string& tag, std::size_t n, bool indexed, int index) {
    std::istringstream ls(detail::expect_line(in, tag));
    std::string got;
    ls >> got;
    if (got != tag) throw InvalidInput("world file: expected '" + tag + "', got '" + got + "'");
    if (indexed) {
      int x = -1;
      ls >> x;
      if (x != index) throw InvalidInput("world file: fault rows out of order");
    }
    std::vector<double> out;
    std::string tok;
    while (ls >> tok) out.push_back(detail::parse_real(tok));
    if (out.size() != n) throw InvalidInput("world file: '" + tag + "' needs " + std::to_string(n) + " values");
    return out;
  };
  require(w.prompts >= 1 && w.len >= 1, "world file: sizes must be positive");
  w.prompt_probs = reals("prompt_probs", static_cast<std::size_t>(w.prompts), false, 0);
  w.class_prior = reals("class_prior", static_cast<std::size_t>(w.prompts), false, 0);
  for (int x = 0; x < w.prompts; ++x) w.fault.push_back(reals("fault", static_cast<std::size_t>(w.len), true, x));
  if (detail::expect_line(in, "[positive]") != "[positive]") throw InvalidInput("world file: missing [positive]");
  w.positive = read_policy(in);
  if (detail::expect_line(in, "[negative]") != "[negative]") throw InvalidInput("world file: missing [negative]");
  w.negative = read_policy(in);
  w.validate();
  return w;
}

inline void save_world(const std::filesystem::path& path, const World& w) { write_text(path, world_to_text(w)); }
inline World load_world(const std::filesystem::path& path) { return world_from_text(read_text(path)); }

}  // namespace pipa
