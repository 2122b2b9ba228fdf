#pragma once

// Scalar reverse-mode differentiation over a flat, append-only tape.
//
// Nodes are stored in creation order, so every operand index is smaller than
// the index of the node that uses it and a single reverse sweep is a valid
// topological traversal. Leaves are either constants or registered
// parameters; parameters are identified by an external ParamId and
// registering the same id twice returns the same leaf.
//
// stop_gradient(x) forwards the value of x and contributes nothing to the
// backward pass. For finite-difference checking, the values of all
// stop-gradient nodes can be recorded from one evaluation and replayed into
// another ("frozen" blocks), so perturbations do not leak through them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pipa/error.hpp"

namespace pipa {

using ParamId = std::uint32_t;

enum class Op : std::uint8_t {
  kParam,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kSigmoid,
  kLogSigmoid,
  kTau,
  kClip,
  kStopGradient,
  kSum,
  kLogSumExp,
  kSquare,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLogSigmoid: return "log_sigmoid";
    case Op::kTau: return "tau";
    case Op::kClip: return "clip";
    case Op::kStopGradient: return "stop_gradient";
    case Op::kSum: return "sum";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kSquare: return "square";
  }
  return "?";
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log σ(x) = -log(1 + e^{-x}), evaluated without overflow for either sign.
inline double log_sigmoid_value(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double tau_value(double x) { return x / (x + 1.0); }

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  double value() const;
  std::uint32_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
};

/// Partial derivatives of a root with respect to every registered parameter.
class GradMap {
 public:
  using Storage = std::map<ParamId, double>;

  bool contains(ParamId id) const { return grads_.count(id) != 0; }

  double at(ParamId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      throw InvalidInput("parameter " + std::to_string(id) + " is not registered on the tape");
    }
    return it->second;
  }

  /// Zero for parameters the root does not depend on.
  double get(ParamId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? 0.0 : it->second;
  }

  std::size_t size() const { return grads_.size(); }
  Storage::const_iterator begin() const { return grads_.begin(); }
  Storage::const_iterator end() const { return grads_.end(); }

 private:
  friend class Tape;
  Storage grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  double value(Var v) const { return nodes_.at(v.index_).value; }
  Op op(Var v) const { return nodes_.at(v.index_).op; }

  Var param(ParamId id, double value) {
    if (auto it = registry_.find(id); it != registry_.end()) {
      return Var(this, it->second);
    }
    Var v = push(Op::kParam, value, 0, 0);
    nodes_[v.index_].param = id;
    registry_.emplace(id, v.index_);
    return v;
  }

  const std::unordered_map<ParamId, std::uint32_t>& registry() const { return registry_; }

  Var constant(double value) { return push(Op::kConst, value, 0, 0); }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b, value(a) + value(b)); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b, value(a) - value(b)); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b, value(a) * value(b)); }

  Var div(Var a, Var b) {
    check_same(a, b);
    if (value(b) == 0.0) fail_domain(Op::kDiv, b, "division by zero");
    return binary(Op::kDiv, a, b, value(a) / value(b));
  }

  Var neg(Var a) { return unary(Op::kNeg, a, -value(a)); }
  Var exp(Var a) { return unary(Op::kExp, a, std::exp(value(a))); }

  Var log(Var a) {
    check_same(a);
    if (!(value(a) > 0.0)) fail_domain(Op::kLog, a, "log of nonpositive value");
    return unary(Op::kLog, a, std::log(value(a)));
  }

  Var sigmoid(Var a) { return unary(Op::kSigmoid, a, sigmoid_value(value(a))); }
  Var log_sigmoid(Var a) { return unary(Op::kLogSigmoid, a, log_sigmoid_value(value(a))); }

  Var tau(Var a) {
    check_same(a);
    if (value(a) == -1.0) fail_domain(Op::kTau, a, "tau pole at -1");
    return unary(Op::kTau, a, tau_value(value(a)));
  }

  Var clip(Var a, double lo, double hi) {
    check_same(a);
    if (!(lo <= hi)) throw InvalidInput("clip bounds out of order");
    Var v = unary(Op::kClip, a, std::min(std::max(value(a), lo), hi));
    nodes_[v.index_].lo = lo;
    nodes_[v.index_].hi = hi;
    return v;
  }

  Var stop_gradient(Var a) {
    check_same(a);
    double v = value(a);
    if (replay_) {
      if (sg_count_ >= sg_replay_.size()) {
        throw InvalidInput("stop-gradient replay has fewer values than the expression uses");
      }
      v = sg_replay_[sg_count_];
    }
    ++sg_count_;
    Var out = unary(Op::kStopGradient, a, v);
    sg_values_.push_back(v);
    return out;
  }

  Var square(Var a) { return unary(Op::kSquare, a, value(a) * value(a)); }

  Var sum(std::span<const Var> xs) {
    if (xs.empty()) return constant(0.0);
    double acc = 0.0;
    for (Var x : xs) {
      check_same(x);
      acc += value(x);
    }
    return nary(Op::kSum, xs, acc);
  }

  Var logsumexp(std::span<const Var> xs) {
    if (xs.empty()) throw InvalidInput("logsumexp of an empty list");
    double m = -std::numeric_limits<double>::infinity();
    for (Var x : xs) {
      check_same(x);
      m = std::max(m, value(x));
    }
    double acc = 0.0;
    for (Var x : xs) acc += std::exp(value(x) - m);
    return nary(Op::kLogSumExp, xs, m + std::log(acc));
  }

  /// Values of every stop-gradient node, in creation order.
  const std::vector<double>& stop_gradient_values() const { return sg_values_; }

  /// Subsequent stop_gradient() calls return these values in order instead of
  /// their operands' values.
  void replay_stop_gradients(std::vector<double> values) {
    sg_replay_ = std::move(values);
    replay_ = true;
  }

  GradMap backward(Var root) const {
    check_same(root);
    const std::size_t n = nodes_.size();
    std::vector<double> adj(n, 0.0);
    adj[root.index_] = 1.0;
    for (std::size_t i = n; i-- > 0;) {
      const double a = adj[i];
      if (a == 0.0) continue;
      const Node& node = nodes_[i];
      if (!std::isfinite(node.value) || !std::isfinite(a)) {
        fail_numeric(static_cast<std::uint32_t>(i), "non-finite value on the backward path");
      }
      switch (node.op) {
        case Op::kParam:
        case Op::kConst:
        case Op::kStopGradient:
          break;
        case Op::kAdd:
          adj[arg(node, 0)] += a;
          adj[arg(node, 1)] += a;
          break;
        case Op::kSub:
          adj[arg(node, 0)] += a;
          adj[arg(node, 1)] -= a;
          break;
        case Op::kMul:
          adj[arg(node, 0)] += a * val(node, 1);
          adj[arg(node, 1)] += a * val(node, 0);
          break;
        case Op::kDiv: {
          const double d = val(node, 1);
          adj[arg(node, 0)] += a / d;
          adj[arg(node, 1)] -= a * node.value / d;
          break;
        }
        case Op::kNeg:
          adj[arg(node, 0)] -= a;
          break;
        case Op::kExp:
          adj[arg(node, 0)] += a * node.value;
          break;
        case Op::kLog:
          adj[arg(node, 0)] += a / val(node, 0);
          break;
        case Op::kSigmoid:
          adj[arg(node, 0)] += a * node.value * (1.0 - node.value);
          break;
        case Op::kLogSigmoid:
          adj[arg(node, 0)] += a * sigmoid_value(-val(node, 0));
          break;
        case Op::kTau: {
          const double d = val(node, 0) + 1.0;
          adj[arg(node, 0)] += a / (d * d);
          break;
        }
        case Op::kClip: {
          // Interior derivative on [lo, hi], zero where the clip is active.
          const double x = val(node, 0);
          if (x >= node.lo && x <= node.hi) adj[arg(node, 0)] += a;
          break;
        }
        case Op::kSquare:
          adj[arg(node, 0)] += 2.0 * a * val(node, 0);
          break;
        case Op::kSum:
          for (std::uint32_t k = 0; k < node.arg_count; ++k) adj[arg(node, k)] += a;
          break;
        case Op::kLogSumExp:
          for (std::uint32_t k = 0; k < node.arg_count; ++k) {
            adj[arg(node, k)] += a * std::exp(val(node, k) - node.value);
          }
          break;
      }
    }
    GradMap out;
    for (const auto& [id, idx] : registry_) {
      const double g = adj[idx];
      if (!std::isfinite(g)) fail_numeric(idx, "non-finite gradient");
      out.grads_.emplace(id, g);
    }
    return out;
  }

 private:
  struct Node {
    Op op;
    double value;
    std::uint32_t arg_begin;
    std::uint32_t arg_count;
    ParamId param = 0;
    double lo = 0.0;
    double hi = 0.0;
  };

  std::uint32_t arg(const Node& n, std::uint32_t k) const { return args_[n.arg_begin + k]; }
  double val(const Node& n, std::uint32_t k) const { return nodes_[arg(n, k)].value; }

  Var push(Op op, double value, std::uint32_t begin, std::uint32_t count) {
    nodes_.push_back(Node{op, value, begin, count});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Var unary(Op op, Var a, double value) {
    check_same(a);
    const auto begin = static_cast<std::uint32_t>(args_.size());
    args_.push_back(a.index_);
    return push(op, value, begin, 1);
  }

  Var binary(Op op, Var a, Var b, double value) {
    check_same(a, b);
    const auto begin = static_cast<std::uint32_t>(args_.size());
    args_.push_back(a.index_);
    args_.push_back(b.index_);
    return push(op, value, begin, 2);
  }

  Var nary(Op op, std::span<const Var> xs, double value) {
    const auto begin = static_cast<std::uint32_t>(args_.size());
    for (Var x : xs) args_.push_back(x.index_);
    return push(op, value, begin, static_cast<std::uint32_t>(xs.size()));
  }

  void check_same(Var a) const {
    if (a.tape_ != this) throw InvalidInput("variable belongs to a different tape");
  }
  void check_same(Var a, Var b) const {
    check_same(a);
    check_same(b);
  }

  [[noreturn]] void fail_domain(Op op, Var operand, std::string_view what) const {
    std::ostringstream os;
    os.precision(17);
    os << what << " in " << op_name(op) << " at node " << nodes_.size() << " (operand node "
       << operand.index_ << " [" << op_name(nodes_[operand.index_].op)
       << "] = " << value(operand) << ")";
    throw DomainError(os.str());
  }

  [[noreturn]] void fail_numeric(std::uint32_t idx, std::string_view what) const {
    std::ostringstream os;
    os << what << " at node " << idx << " [" << op_name(nodes_[idx].op) << "]";
    throw NumericError(os.str());
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> args_;
  std::unordered_map<ParamId, std::uint32_t> registry_;
  std::vector<double> sg_values_;
  std::vector<double> sg_replay_;
  std::size_t sg_count_ = 0;
  bool replay_ = false;
};

inline double Var::value() const { return tape_->value(*this); }

inline Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape()->div(a, b); }
inline Var operator-(Var a) { return a.tape()->neg(a); }

inline Var operator+(Var a, double b) { return a + a.tape()->constant(b); }
inline Var operator+(double a, Var b) { return b.tape()->constant(a) + b; }
inline Var operator-(Var a, double b) { return a - a.tape()->constant(b); }
inline Var operator-(double a, Var b) { return b.tape()->constant(a) - b; }
inline Var operator*(Var a, double b) { return a * a.tape()->constant(b); }
inline Var operator*(double a, Var b) { return b.tape()->constant(a) * b; }
inline Var operator/(Var a, double b) { return a / a.tape()->constant(b); }
inline Var operator/(double a, Var b) { return b.tape()->constant(a) / b; }

inline Var exp(Var a) { return a.tape()->exp(a); }
inline Var log(Var a) { return a.tape()->log(a); }
inline Var sigmoid(Var a) { return a.tape()->sigmoid(a); }
inline Var log_sigmoid(Var a) { return a.tape()->log_sigmoid(a); }
inline Var tau(Var a) { return a.tape()->tau(a); }
inline Var clip(Var a, double lo, double hi) { return a.tape()->clip(a, lo, hi); }
inline Var stop_gradient(Var a) { return a.tape()->stop_gradient(a); }
inline Var square(Var a) { return a.tape()->square(a); }

inline Var sum(Tape& tape, std::span<const Var> xs) { return tape.sum(xs); }
inline Var logsumexp(Tape& tape, std::span<const Var> xs) { return tape.logsumexp(xs); }

/// Compares backward() against central differences over every coordinate of
/// `theta` and returns max |analytic - numeric| / max(1, |numeric|).
///
/// `build(tape, theta)` must register theta[i] under ParamId i. Stop-gradient
/// blocks are held at the values recorded at `theta` while probing.
template <class Build>
double check_gradient(Build&& build, std::span<const double> theta, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw InvalidInput("check_gradient: eps must lie in (0, 1e-2]");
  Tape base;
  const Var root = build(base, theta);
  if (!std::isfinite(root.value())) throw NumericError("check_gradient: f is non-finite at theta");
  const GradMap grads = base.backward(root);
  const std::vector<double> frozen = base.stop_gradient_values();

  std::vector<double> probe(theta.begin(), theta.end());
  auto eval = [&](double x, std::size_t i) {
    probe[i] = x;
    Tape t;
    t.replay_stop_gradients(frozen);
    const double v = build(t, std::span<const double>(probe)).value();
    if (!std::isfinite(v)) {
      throw NumericError("check_gradient: f is non-finite at probe of coordinate " +
                         std::to_string(i));
    }
    return v;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double plus = eval(theta[i] + eps, i);
    const double minus = eval(theta[i] - eps, i);
    probe[i] = theta[i];
    const double numeric = (plus - minus) / (2.0 * eps);
    const double analytic = grads.get(static_cast<ParamId>(i));
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace pipa
