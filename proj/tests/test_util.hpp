#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fedsplit/rng.hpp"
#include "fedsplit/tensor.hpp"

namespace testutil {

inline fedsplit::Tensor random_tensor(const std::vector<int>& shape, fedsplit::Rng& rng,
                                      bool requires_grad = true, double scale = 1.0) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<float> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * scale);
  return fedsplit::Tensor::from_data(shape, std::move(data), requires_grad);
}

// Central-difference check of d(loss)/d(leaf) against the autograd gradient.
// `loss` must rebuild the full graph from the leaves' current data on every
// call (any internal randomness must be reseeded identically).
struct FdCheck {
  double max_rel_err = 0.0;
  int checked = 0;
  bool ok = true;
  std::string detail;
};

inline FdCheck finite_difference(const std::function<fedsplit::Tensor()>& loss,
                                 std::vector<fedsplit::Tensor> leaves, double h = 1e-3,
                                 double rel_tol = 1e-3, double abs_floor = 2e-4) {
  FdCheck result;
  fedsplit::Tensor out = loss();
  out.backward();
  std::vector<std::vector<float>> grads;
  for (auto& leaf : leaves) {
    grads.push_back(leaf.has_grad() ? leaf.grad() : std::vector<float>(leaf.size(), 0.0f));
  }
  fedsplit::NoGradGuard guard;  // the FD probes need only forward values
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li].data();
    for (size_t i = 0; i < data.size(); ++i) {
      const float keep = data[i];
      data[i] = keep + static_cast<float>(h);
      const double up = static_cast<double>(loss().item());
      data[i] = keep - static_cast<float>(h);
      const double down = static_cast<double>(loss().item());
      data[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double ad = static_cast<double>(grads[li][i]);
      const double err = std::fabs(ad - fd);
      const double tol = rel_tol * std::max(std::fabs(ad), std::fabs(fd)) + abs_floor;
      const double rel = err / std::max(1e-12, std::max(std::fabs(ad), std::fabs(fd)));
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.checked;
      if (err > tol && result.ok) {
        result.ok = false;
        result.detail = "leaf " + std::to_string(li) + " elem " + std::to_string(i) + ": ad=" +
                        std::to_string(ad) + " fd=" + std::to_string(fd);
      }
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

// Reduces an arbitrary tensor to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
inline fedsplit::Tensor probe(const fedsplit::Tensor& y, const fedsplit::Tensor& weights) {
  return fedsplit::sum(fedsplit::mul(y, weights));
}

}  // namespace testutil
