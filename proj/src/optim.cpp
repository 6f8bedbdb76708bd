#include "fedst/optim.hpp"

#include <cmath>

namespace fedst::num {

Optimizer::Optimizer(std::vector<Tensor*> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  moments_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    moments_[i].m.assign(params_[i]->numel(), 0.0);
    moments_[i].v.assign(params_[i]->numel(), 0.0);
  }
}

void Optimizer::step() {
  for (Tensor* p : params_) {
    if (!p->has_grad()) {
      throw ContractError("optimizer step with a parameter missing its grad");
    }
  }
  ++t_;
  if (cfg_.kind == OptimKind::sgd) {
    for (Tensor* p : params_) {
      const std::vector<double>& g = p->grad();
      for (std::size_t i = 0; i < p->numel(); ++i) {
        (*p)[i] -= cfg_.lr * g[i];
      }
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = *params_[pi];
    const std::vector<double>& g = p.grad();
    Moments& mo = moments_[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g[i];
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = mo.m[i] / bc1;
      const double v_hat = mo.v[i] / bc2;
      p[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void Optimizer::zero_grad() {
  for (Tensor* p : params_) {
    p->ensure_grad();
    p->zero_grad();
  }
}

void Optimizer::reset_state() {
  t_ = 0;
  for (Moments& mo : moments_) {
    std::fill(mo.m.begin(), mo.m.end(), 0.0);
    std::fill(mo.v.begin(), mo.v.end(), 0.0);
  }
}

}  // namespace fedst::num
