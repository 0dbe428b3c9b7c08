// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <vector>

#include "unir/ops.hpp"

namespace unir {

struct GradCheckReport {
  double max_error = 0.0;
  double naive_max_error = 0.0;  // plain central differences at eps, kinks included
  std::size_t entries = 0;    // parameter entries compared
  std::size_t refined = 0;    // compared at a step below eps because eps crossed a kink
  std::size_t straddled = 0;  // every allowed step crossed a kink; not compared
};

inline constexpr double kGradCheckMinStep = 1e-4;
inline constexpr double kGradCheckMaxStep = 1e-2;

// Compares taped gradients of a scalar function against central finite
// differences: max over parameter entries of
// |analytic - numeric| / max(1, |numeric|).
//
// A central difference whose two evaluations take a different relu/abs
// branch than the unperturbed point is not a derivative estimate. Such an
// entry is retried at step / 10 down to 1e-4; if it still crosses, it is
// counted in `straddled` and left out of max_error.
template <class F, class T = typename std::invoke_result_t<F&>::value_type>
GradCheckReport grad_check_report(F&& forward_fn, std::type_identity_t<std::vector<BasicTensor<T>>> params,
                                  std::type_identity_t<T> eps) {
  if (!(eps >= T(kGradCheckMinStep) && eps <= T(kGradCheckMaxStep)))
    throw Error("InvalidArgument", "grad_check eps must lie in [1e-4, 1e-2]");

  struct Sample {
    double value;
    std::uint64_t signature;
  };
  auto evaluate = [&] {
    NoGradScope no_grad;
    KinkTrace trace;
    const double v = static_cast<double>(forward_fn().item());
    return Sample{v, trace.signature()};
  };
  const Sample base = evaluate();
  if (base.value != evaluate().value)
    throw Error("NonDeterministic", "forward_fn returned different values on repeated calls");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    BasicTensor<T> loss = forward_fn();
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& p : params) {
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      double step = static_cast<double>(eps);
      bool compared = false;
      for (bool first = true;; first = false) {
        const T up = static_cast<T>(original + step), down = static_cast<T>(original - step);
        values[i] = up;
        const Sample s_up = evaluate();
        values[i] = down;
        const Sample s_down = evaluate();
        values[i] = original;
        // Divide by the step actually representable in T.
        const double numeric =
            (s_up.value - s_down.value) / (static_cast<double>(up) - static_cast<double>(down));
        const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric));
        if (first) report.naive_max_error = std::max(report.naive_max_error, err);
        if (s_up.signature == base.signature && s_down.signature == base.signature) {
          report.max_error = std::max(report.max_error, err);
          if (!first) ++report.refined;
          compared = true;
          break;
        }
        if (step / 10.0 < kGradCheckMinStep * (1.0 - 1e-9)) break;
        step /= 10.0;
      }
      if (compared) ++report.entries;
      else ++report.straddled;
    }
  }
  return report;
}

template <class F, class T = typename std::invoke_result_t<F&>::value_type>
double grad_check(F&& forward_fn, std::type_identity_t<std::vector<BasicTensor<T>>> params,
                  std::type_identity_t<T> eps) {
  return grad_check_report(std::forward<F>(forward_fn), std::move(params), eps).max_error;
}

}  // namespace unir
