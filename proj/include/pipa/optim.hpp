#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pipa/error.hpp"

namespace pipa {

enum class OptimizerKind { kSgd, kAdam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw InvalidInput("unknown optimizer '" + s + "' (expected sgd|adam)");
}

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order minimizer over a flat parameter vector.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::size_t n, AdamParams adam = {})
      : kind_(kind), adam_(adam), m_(n, 0.0), v_(n, 0.0) {}

  /// theta <- theta - lr * update(grad). Coordinates with mask[i] == false are
  /// left untouched (and their moments are not advanced).
  void step(std::span<double> theta, std::span<const double> grad, double lr,
            const std::vector<bool>* mask = nullptr) {
    require(theta.size() == m_.size() && grad.size() == m_.size(), "optimizer size mismatch");
    ++t_;
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        theta[i] -= lr * grad[i];
      }
      return;
    }
    const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      m_[i] = adam_.beta1 * m_[i] + (1.0 - adam_.beta1) * grad[i];
      v_[i] = adam_.beta2 * v_[i] + (1.0 - adam_.beta2) * grad[i] * grad[i];
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + adam_.eps);
    }
  }

  long steps() const { return t_; }

 private:
  OptimizerKind kind_;
  AdamParams adam_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace pipa
