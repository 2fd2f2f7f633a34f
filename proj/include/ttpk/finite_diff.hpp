#pragma once

#include <functional>

#include "ttpk/tensor.hpp"

namespace ttpk {

// Central-difference gradient of a deterministic scalar function:
// (f(x+h) - f(x-h)) / (2h), evaluated per element.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  Tensor g(x.shape);
  Tensor probe = x.clone();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Scale-aware agreement check used by the gradient suites: relative for
// large entries, absolute (vs 1) for small ones.
inline double grad_rel_err(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw DimensionError("grad_rel_err: shape mismatch");
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1.0});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace ttpk
