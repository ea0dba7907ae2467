#pragma once

#include <functional>
#include <vector>

#include "cacheproc/tensor.h"

namespace cacheproc {

// Compares analytic gradients against central finite differences for a scalar
// loss f of the given f64 parameters. Returns the max over all parameter
// elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
//
// f must be deterministic (it is evaluated twice up front and the values are
// compared bit-for-bit) and must read the parameters through the given
// handles so perturbations are visible.
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps = 1e-5);

}  // namespace cacheproc
