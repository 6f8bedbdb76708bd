#pragma once

#include <cstdint>
#include <vector>

#include "fedst/tensor.hpp"

namespace fedst::num {

enum class OptimKind { adam, sgd };

struct OptimConfig {
  OptimKind kind = OptimKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Owns the moment buffers for a fixed parameter set. The parameter tensors
// themselves live elsewhere (models); the optimizer only reads grads and
// writes values.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor*> params, OptimConfig cfg);

  // One update from the currently populated grads. Throws ContractError if
  // any parameter is missing its gradient buffer.
  void step();
  void zero_grad();
  // Drops moments and the step counter (used when a node is re-seeded from
  // freshly averaged weights).
  void reset_state();

  const OptimConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Tensor*> params_;
  OptimConfig cfg_;
  std::vector<Moments> moments_;
  std::int64_t t_ = 0;
};

}  // namespace fedst::num
