#include "pcgan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pcgan/errors.hpp"

namespace pcgan {

namespace {

// One-sided slopes that differ by more than this (relative) mark a
// nondifferentiable point; smooth functions differ by O(f'' * eps).
constexpr double kKinkTolerance = 1e-2;

// Recording stays enabled: `f` may itself differentiate (penalty terms).
double evaluate(const std::function<Tensor()>& f) {
  Tensor y = f();
  const double v = static_cast<double>(y.item());
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor()>& f, Tensor leaf, double eps) {
  if (!(eps > 0)) throw UsageError("finite_difference_check: eps must be positive");
  if (!leaf.is_leaf()) throw UsageError("finite_difference_check: target must be a leaf tensor");
  const bool had_grad = leaf.requires_grad();
  leaf.set_requires_grad(true);

  std::vector<double> analytic;
  double f0 = 0;
  {
    Tensor y = f();
    f0 = static_cast<double>(y.item());
    if (!std::isfinite(f0)) throw NumericError("finite_difference_check: function value is not finite");
    Tensor g = backward(y).get_or_zeros(leaf);
    for (Real v : g.values()) {
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("finite_difference_check: analytic gradient is not finite");
      analytic.push_back(static_cast<double>(v));
    }
  }

  GradCheckResult result;
  auto values = leaf.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Real original = values[i];
    values[i] = static_cast<Real>(original + eps);
    const double plus = evaluate(f);
    values[i] = static_cast<Real>(original - eps);
    const double minus = evaluate(f);
    values[i] = original;

    const double central = (plus - minus) / (2 * eps);
    const double forward = (plus - f0) / eps;
    const double backward_slope = (f0 - minus) / eps;
    if (std::abs(forward - backward_slope) > kKinkTolerance * std::max(1.0, std::abs(central))) {
      ++result.excluded;
      continue;
    }
    const double err = std::abs(analytic[i] - central) / std::max(1.0, std::abs(analytic[i]));
    result.max_relative_error = std::max(result.max_relative_error, err);
    ++result.checked;
  }
  leaf.set_requires_grad(had_grad);
  return result;
}

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double eps) {
  Tensor leaf(x.shape(), std::vector<Real>(x.values().begin(), x.values().end()), true);
  return finite_difference_check([&] { return f(leaf); }, leaf, eps);
}

}  // namespace pcgan
