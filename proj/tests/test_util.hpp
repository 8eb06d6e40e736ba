#pragma once

#include <cmath>
#include <functional>

#include "fd2/autodiff.hpp"
#include "fd2/core.hpp"

namespace fd2::test {

// Central finite-difference gradient check at fp64. `build` maps a leaf
// variable to a scalar graph; the analytic gradient from backward() must
// match the numeric one within rel_tol away from kinks.
template <typename F>
void check_gradient(F&& build, const Tensor<double>& x0, double h = 1e-6,
                    double rel_tol = 1e-4) {
  auto x = ad::leaf(x0);
  auto loss = build(x);
  ad::backward(loss);
  Tensor<double> analytic =
      x->has_grad() ? x->grad : Tensor<double>::zeros(x0.shape);

  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    Tensor<double> xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    const double fp = build(ad::constant(xp))->value[0];
    const double fm = build(ad::constant(xm))->value[0];
    const double numeric = (fp - fm) / (2 * h);
    const double err = std::abs(analytic[i] - numeric);
    const double denom =
        std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    if (err / denom >= rel_tol)
      throw std::runtime_error(
          "gradient mismatch at index " + std::to_string(i) + ": analytic " +
          std::to_string(analytic[i]) + " vs numeric " +
          std::to_string(numeric));
  }
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng,
                                    double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.v) v = rng.normal(0.0, scale);
  return t;
}

inline Tensor<float> random_tensor_f(std::vector<int> shape, Rng& rng,
                                     double scale = 1.0) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.v) v = static_cast<float>(rng.normal(0.0, scale));
  return t;
}

}  // namespace fd2::test
