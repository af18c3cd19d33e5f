#pragma once

#include <cmath>
#include <vector>

#include "difflm/error.hpp"
#include "difflm/tensor.hpp"

namespace difflm {

// Adam with bias correction. Holds first/second moment state per registered
// parameter; step() applies the update in place and clears gradients, so it
// must only run between training steps when no live graph references the
// parameter values.
template <typename Real>
class Adam {
 public:
  explicit Adam(Real lr, Real beta1 = Real(0.9), Real beta2 = Real(0.999),
                Real eps = Real(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add_param(Tensor<Real> p) {
    if (!p.requires_grad())
      throw ContractError("adam: parameter does not require grad");
    slots_.push_back({p,
                      std::vector<Real>(p.values().size(), Real(0)),
                      std::vector<Real>(p.values().size(), Real(0))});
  }

  void add_params(const std::vector<Tensor<Real>> &ps) {
    for (const auto &p : ps) add_param(p);
  }

  void step() {
    ++t_;
    const Real bc1 = Real(1) - std::pow(beta1_, Real(t_));
    const Real bc2 = Real(1) - std::pow(beta2_, Real(t_));
    for (auto &s : slots_) {
      const auto &g = s.param.grad();
      auto &v = s.param.values_mut();
      for (size_t i = 0; i < v.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (Real(1) - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (Real(1) - beta2_) * g[i] * g[i];
        const Real mhat = s.m[i] / bc1;
        const Real vhat = s.v[i] / bc2;
        v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      s.param.zero_grad();
    }
  }

  void set_lr(Real lr) { lr_ = lr; }
  Real lr() const { return lr_; }
  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor<Real> param;
    std::vector<Real> m, v;
  };
  Real lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace difflm
