#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
};

// Central finite differences against tape gradients. `f` must rebuild its
// forward pass from the current parameter values on the given tape and
// return a 1x1 loss. Relative error per entry is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check_full(const std::function<Tensor(Tape&)>& f,
                                       std::vector<Tensor> params, double h = 1e-5) {
  if (!(h > 1e-8 && h < 1e-3)) {
    throw ConfigError("grad_check: h must lie in (1e-8, 1e-3), got " + std::to_string(h));
  }
  for (auto& p : params) p.zero_grad();
  Tape tape;
  Tensor loss = f(tape);
  if (!std::isfinite(loss.value())) {
    throw NumericalError("grad_check: non-finite loss at base point");
  }
  tape.backward_from(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  auto eval = [&f]() {
    Tape t;
    return f(t).value();
  };

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double saved = p.data()[k];
      p.data()[k] = saved + h;
      const double fp = eval();
      p.data()[k] = saved - h;
      const double fm = eval();
      p.data()[k] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericalError("grad_check: non-finite evaluation at param " +
                             std::to_string(pi) + " entry " + std::to_string(k));
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][k];
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = pi;
        res.worst_entry = k;
      }
    }
  }
  return res;
}

inline double grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> params,
                         double h = 1e-5) {
  return grad_check_full(f, std::move(params), h).max_rel_error;
}

}  // namespace bilayer
