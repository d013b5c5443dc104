#pragma once

#include <cmath>
#include <functional>

#include "incseg/losses.hpp"
#include "incseg/network.hpp"
#include "incseg/rng.hpp"

namespace incseg::testing {

struct GradCheck {
  Real max_rel_error = 0;
  Real max_abs_error_small = 0;  // over elements with |g| < 1e-8
  std::size_t checked = 0;
  bool pass(Real rel_tol = 1e-4, Real abs_tol = 1e-6) const {
    return max_rel_error <= rel_tol && max_abs_error_small <= abs_tol;
  }
};

/// A loss evaluated on a fixed batch with a replayed dropout stream.
struct LossProblem {
  Tensor input;
  std::vector<SampleTargets> targets;
  LossOptions options;
  std::uint64_t dropout_seed = 1;

  LossBreakdown evaluate(SegmentationNetwork& net, Tape& tape) const {
    Rng rng(dropout_seed);
    const auto out = net.forward_train(input, rng, tape);
    return total_loss(out, targets, options);
  }
  Real value(SegmentationNetwork& net) const {
    Tape tape;
    return evaluate(net, tape).total;
  }
};

/// Analytic parameter gradients against a five-point central difference.
inline GradCheck check_gradients(SegmentationNetwork& net, const LossProblem& problem, Real h = 1e-4) {
  net.zero_grad();
  Tape tape;
  const auto r = problem.evaluate(net, tape);
  net.backward(tape, r.dlogits);
  GradCheck gc;
  for (Param* p : net.parameters()) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const Real x0 = p->value[i];
      auto f = [&](Real dx) {
        p->value[i] = x0 + dx;
        return problem.value(net);
      };
      const Real numeric = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
      p->value[i] = x0;
      const Real analytic = p->grad[i];
      const Real err = std::abs(analytic - numeric);
      if (std::max(std::abs(analytic), std::abs(numeric)) < 1e-8) {
        gc.max_abs_error_small = std::max(gc.max_abs_error_small, err);
      } else {
        gc.max_rel_error = std::max(gc.max_rel_error, err / std::max(std::abs(analytic), std::abs(numeric)));
      }
      ++gc.checked;
    }
  }
  return gc;
}

/// Two-sample batch on the toy network. kind selects the branch under test:
/// 0 classification only, 1 distillation only, 2 combined (one incremental, one exemplar sample).
struct ToyLossFixture {
  SegmentationNetwork net;
  Tensor input;
  Mask2 mask_new;
  Tensor snapshot0, snapshot1;

  explicit ToyLossFixture(std::uint64_t seed) {
    NetworkConfig c;
    c.levels = 2;
    c.base_filters = 1;
    c.convs_per_level = 1;
    c.dropout_rate = 0.3;
    c.input_height = c.input_width = 8;
    net = SegmentationNetwork(c, derive_seed(seed, "body"));
    net.add_head(ClassId{1}, derive_seed(seed, "head1"));
    net.add_head(ClassId{2}, derive_seed(seed, "head2"));
    Rng rng(derive_seed(seed, "data"));
    // Non-zero biases so that every parameter carries signal.
    for (Param* p : net.parameters()) {
      for (auto& v : p->value) v += rng.uniform(-0.1, 0.1);
    }
    input = Tensor(2, 1, 8, 8);
    for (auto& v : input.values()) v = rng.uniform(-1.0, 1.0);
    mask_new = Mask2(8, 8);
    for (auto& v : mask_new.data) v = rng.uniform() < 0.4 ? 1 : 0;
    auto snap = [&] {
      Tensor t(1, 2, 8, 8);
      for (std::size_t k = 0; k < t.plane_size(); ++k) {
        const Real q = rng.uniform(0.02, 0.98);
        t.plane(0, 0)[k] = q;
        t.plane(0, 1)[k] = 1 - q;
      }
      return t;
    };
    snapshot0 = snap();
    snapshot1 = snap();
  }

  LossProblem problem(int kind, Real alpha = 0.5) const {
    LossProblem p;
    p.input = input;
    p.options.weights.alpha = alpha;
    p.dropout_seed = 5;
    SampleTargets a, b;
    if (kind == 0) {
      a.membership = b.membership = Membership::supervised;
      a.ground_truth[ClassId{2}] = &mask_new;
      b.ground_truth[ClassId{2}] = &mask_new;
    } else if (kind == 1) {
      a.membership = b.membership = Membership::exemplar;
      a.snapshot[ClassId{1}] = &snapshot0;
      b.snapshot[ClassId{1}] = &snapshot1;
    } else {
      a.membership = Membership::incremental;
      a.ground_truth[ClassId{2}] = &mask_new;
      a.snapshot[ClassId{1}] = &snapshot0;
      b.membership = Membership::exemplar;
      b.snapshot[ClassId{1}] = &snapshot1;
    }
    p.targets = {a, b};
    return p;
  }
};

}  // namespace incseg::testing
