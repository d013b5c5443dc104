#pragma once

#include <vector>

#include "incseg/layers.hpp"

namespace incseg {

enum class OptimizerKind { adam, sgd };
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  Real learning_rate = 1e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

/// Adam (or plain SGD) over a fixed parameter list. Moment buffers are keyed by position,
/// so the list must not change between steps.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Param*> params);

  void step();
  long steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<Param*> params_;
  std::vector<std::vector<Real>> m_, v_;
  long t_ = 0;
};

}  // namespace incseg
