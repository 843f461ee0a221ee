#pragma once

#include <cstddef>
#include <functional>

#include "bbg/autodiff.hpp"

namespace bbg {

// Builds a scalar loss on the given tape from the trainable leaf `x`.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// Central-difference check of the tape gradient of f at x. Relative error per
// coordinate is |a - fd| / max(|a|, |fd|, 1e-8). Coordinates with
// |x_i| < kink_guard are skipped (pass 10 * h when f applies relu directly
// to its input).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-4,
                           double kink_guard = 0.0);

}  // namespace bbg
