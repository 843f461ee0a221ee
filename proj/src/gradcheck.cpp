#include "bbg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "bbg/error.hpp"

namespace bbg {
namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, true);
  const double v = f(tape, in).value().item();
  require(std::isfinite(v), ErrorCode::kNonFinite,
          "grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double h,
                           double kink_guard) {
  Tape tape;
  Var in = tape.leaf(x, true);
  Var loss = f(tape, in);
  const Tensor analytic = tape.backward(loss).at(in);

  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < kink_guard) {
      ++result.skipped;
      continue;
    }
    probe[i] = x[i] + h;
    const double up = evaluate(f, probe);
    probe[i] = x[i] - h;
    const double down = evaluate(f, probe);
    probe[i] = x[i];
    const double fd = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - fd) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace bbg
