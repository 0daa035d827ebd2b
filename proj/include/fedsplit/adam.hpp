#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedsplit/tensor.hpp"

namespace fedsplit {

// Canonically ordered (by name) parameter collection; every reduction over it
// iterates in the same order on every run.
using NamedTensors = std::map<std::string, Tensor>;

struct AdamConfig {
  float lr = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Bias-corrected Adam over a named parameter set. Moments are zero-initialized
// on first sight of a parameter; the step counter advances once per step().
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  // Applies one update using each parameter's populated gradient. Parameters
  // without a gradient or listed in `frozen` are left untouched (their moment
  // state does not advance either). Gradients are consumed (zeroed).
  void step(NamedTensors& params, const std::set<std::string>& frozen = {});

 private:
  struct Slot {
    std::vector<float> m, v;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
  int64_t step_ = 0;
};

}  // namespace fedsplit
