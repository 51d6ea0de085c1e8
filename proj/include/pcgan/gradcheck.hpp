#pragma once

#include <cstddef>
#include <functional>

#include "pcgan/tensor.hpp"

namespace pcgan {

struct GradCheckResult {
  /// max over checked coordinates of |analytic - central| / max(1, |analytic|)
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because the one-sided differences disagree (a kink).
  std::size_t excluded = 0;
};

/// Central-difference check of d f() / d leaf. `leaf` is perturbed in place
/// and restored; `f` must rebuild its graph from the leaf on every call.
GradCheckResult finite_difference_check(const std::function<Tensor()>& f, Tensor leaf, double eps);

/// Same check for a pure function of one tensor argument.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double eps);

}  // namespace pcgan
