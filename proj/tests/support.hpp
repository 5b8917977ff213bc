#pragma once

// Test-only helpers: random fixtures and the central finite-difference oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "deepir/tensor.hpp"

namespace deepir::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from
// turning finite-difference round-off into huge relative errors.
inline double rel_error(double a, double n, double floor = 1e-4) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline double max_rel_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

// Central differences of a scalar function with respect to every entry of x.
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double step = 1e-5) {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double weighted_sum(const Tensor& out, const Tensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

}  // namespace deepir::testing
