#pragma once

#include <functional>

#include "meow/tensor.hpp"

namespace meow {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Checks reverse-mode gradients of a scalar function against central finite
// differences, element by element over params. The relative error for one
// element is |analytic - central| / (|central| + 1e-12); the report carries
// the worst one. f must be deterministic (run dropout in eval mode or under a
// fixed mask): it is evaluated once under a tape for the analytic gradients
// and twice per element, tape-free, for the differences.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const ParamList& params, double eps = 1e-5);

}  // namespace meow
