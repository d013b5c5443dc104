#include "incseg/optimizer.hpp"

#include <cmath>

namespace incseg {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw Error(ErrorKind::config, "unknown optimizer '" + s + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Param*> params) : config_(config), params_(std::move(params)) {
  if (!(config_.learning_rate > 0)) throw Error(ErrorKind::config, "learning rate must be positive");
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Optimizer::step() {
  ++t_;
  const Real lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (auto* p : params_) {
      for (std::size_t k = 0; k < p->value.size(); ++k) p->value[k] -= lr * p->grad[k];
    }
    return;
  }
  const Real b1 = config_.beta1, b2 = config_.beta2;
  const Real c1 = 1 - std::pow(b1, static_cast<Real>(t_));
  const Real c2 = 1 - std::pow(b2, static_cast<Real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const Real g = p.grad[k];
      m[k] = b1 * m[k] + (1 - b1) * g;
      v[k] = b2 * v[k] + (1 - b2) * g * g;
      p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

}  // namespace incseg
