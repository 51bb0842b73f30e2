#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "lofit/tensor.hpp"

namespace lofit {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool passed = true;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the autodiff gradient of `f` at `x` with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h, coordinate by coordinate.
///
/// The error for coordinate i is |a_i - n_i| / max(1, |a_i|, |n_i|): relative
/// for gradients of magnitude above one, absolute below. With f32 forwards a
/// pure relative measure is dominated by rounding for tiny gradients.
inline GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                         double h = 1e-3, double tol = 1e-3) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff_check: h must be positive");
  GradCheckReport report;
  report.tolerance = tol;

  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor out = f(leaf);
  if (out.numel() != 1) throw InvalidArgument("finite_diff_check: f must return a scalar");
  backward(out);

  const std::size_t n = leaf.numel();
  report.analytic.assign(n, 0.0);
  if (leaf.has_grad()) {
    for (std::size_t i = 0; i < n; ++i) report.analytic[i] = leaf.grad()[i];
  }
  report.numeric.resize(n);

  NoGradGuard no_grad;
  Tensor probe = x.detach();
  for (std::size_t i = 0; i < n; ++i) {
    const float original = probe.data()[i];
    probe.mutable_data()[i] = static_cast<float>(original + h);
    const double plus = f(probe).item();
    probe.mutable_data()[i] = static_cast<float>(original - h);
    const double minus = f(probe).item();
    probe.mutable_data()[i] = original;
    // Use the actually representable step so rounding of x +/- h is not error.
    const double step = static_cast<double>(static_cast<float>(original + h)) -
                        static_cast<double>(static_cast<float>(original - h));
    const double numeric = (plus - minus) / step;
    report.numeric[i] = numeric;
    const double a = report.analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace lofit
