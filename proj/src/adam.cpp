#include "fedsplit/adam.hpp"

#include <cmath>

namespace fedsplit {

void Adam::step(NamedTensors& params, const std::set<std::string>& frozen) {
  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
  for (auto& [name, param] : params) {
    if (frozen.count(name)) {
      param.zero_grad();
      continue;
    }
    if (!param.has_grad()) continue;
    auto& slot = slots_[name];
    auto& data = param.data();
    const auto& grad = param.grad();
    if (slot.m.empty()) {
      slot.m.assign(data.size(), 0.0f);
      slot.v.assign(data.size(), 0.0f);
    }
    if (slot.m.size() != data.size() || grad.size() != data.size()) {
      throw DimensionError("adam: size mismatch for parameter '" + name + "'");
    }
    for (size_t i = 0; i < data.size(); ++i) {
      const float g = grad[i];
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0f - cfg_.beta1) * g;
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0f - cfg_.beta2) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      data[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    param.zero_grad();
  }
}

}  // namespace fedsplit
