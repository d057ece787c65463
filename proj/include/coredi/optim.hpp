#pragma once

#include <cmath>
#include <vector>

namespace coredi {

/// Decoupled-weight-decay Adam for a flat parameter vector.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
  };

  /// One update at 1-based iteration `t`.
  void step(std::vector<double>& param, const std::vector<double>& grad, Slot& slot, double lr, std::size_t t) const {
    if (slot.m.empty()) {
      slot.m.assign(param.size(), 0.0);
      slot.v.assign(param.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
      slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * grad[i];
      slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double update = (slot.m[i] / c1) / (std::sqrt(slot.v[i] / c2) + eps);
      param[i] -= lr * (update + weight_decay * param[i]);
    }
  }
};

/// w_ema <- decay * w_ema + (1 - decay) * w.
inline void ema_update(std::vector<double>& ema, const std::vector<double>& current, double decay) {
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * current[i];
}

}  // namespace coredi
