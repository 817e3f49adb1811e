#pragma once

// Finite-difference gradient oracle. Independent of the reverse-mode path: it
// only re-evaluates the caller's forward closure at perturbed inputs.

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "lowlight/tensor.hpp"

namespace testsupport {

// |a-b| <= tol * max(1, |a|, |b|)
inline bool close_rel(double a, double b, double tol) {
  const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) <= tol * scale;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// f re-runs the forward pass from the tensors' current data and returns the
// scalar objective. Gradients must already be populated (backward() ran).
// Checks every element, or a seeded random subset of max_per_tensor when > 0.
inline GradCheckResult grad_check(const std::function<double()>& f,
                                  std::vector<lowlight::Tensor> params,
                                  double eps = 1e-5, int max_per_tensor = 0,
                                  std::uint64_t subset_seed = 17) {
  GradCheckResult res;
  lowlight::Rng pick(subset_seed);
  for (auto& p : params) {
    const auto& g = p.grad();
    auto& d = p.mutable_data();
    std::vector<std::size_t> idx;
    if (max_per_tensor > 0 && d.size() > static_cast<std::size_t>(max_per_tensor)) {
      for (int i = 0; i < max_per_tensor; ++i) idx.push_back(pick.below(d.size()));
    } else {
      idx.resize(d.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    for (std::size_t i : idx) {
      const double keep = d[i];
      d[i] = keep + eps;
      const double fp = f();
      d[i] = keep - eps;
      const double fm = f();
      d[i] = keep;
      const double fd = (fp - fm) / (2.0 * eps);
      const double scale = std::max({1.0, std::fabs(fd), std::fabs(g[i])});
      res.max_rel_err = std::max(res.max_rel_err, std::fabs(fd - g[i]) / scale);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testsupport
