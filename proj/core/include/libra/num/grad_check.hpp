#pragma once

#include <functional>
#include <vector>

#include "libra/num/tensor.hpp"

namespace libra::num {

/// Scalar function of a list of parameter tensors.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>& params)>;

/// Central-difference oracle. Returns the maximum, over every scalar entry of
/// every parameter, of |analytic - (f(p+eps) - f(p-eps)) / 2eps| / max(1, |analytic|).
/// `params` are re-wrapped as gradient-tracking leaves before use.
/// Throws NumericError if f produces a non-finite value.
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double eps = 1e-6);

/// As above, with the analytic gradient taken from `analytic` and the central
/// differences from `numeric` (a smooth surrogate with the same gradient at
/// `params`).
double finite_diff_check(const ScalarFn& analytic, const ScalarFn& numeric, const std::vector<Tensor>& params,
                         double eps = 1e-6);

}  // namespace libra::num
