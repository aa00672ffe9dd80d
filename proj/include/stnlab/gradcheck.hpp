#pragma once

#include <cmath>
#include <functional>

#include "stnlab/tensor.hpp"

namespace stnlab {

// Central-difference check of reverse-mode gradients. `fn` must build a
// scalar loss from the given tensor on the given tape, deterministically.
// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
inline double numeric_grad_check(const std::function<Tensor(Tape&, const Tensor&)>& fn,
                                 const Tensor& point, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2))
    throw InvalidInputError("numeric_grad_check: epsilon must be in (0, 1e-2], got " +
                            std::to_string(epsilon));

  Tensor p = point.clone(/*requires_grad=*/true);
  Tape tape;
  Tensor loss = fn(tape, p);
  if (loss.numel() != 1)
    throw InvalidInputError("numeric_grad_check: fn must return a scalar");
  backward(tape, loss);
  const std::vector<double> analytic = p.grad();

  Tensor x = point.clone(/*requires_grad=*/false);
  double max_err = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = x.values()[i];
    Tape t_plus;
    t_plus.set_recording(false);
    x.values()[i] = saved + epsilon;
    const double f_plus = fn(t_plus, x).item();
    Tape t_minus;
    t_minus.set_recording(false);
    x.values()[i] = saved - epsilon;
    const double f_minus = fn(t_minus, x).item();
    x.values()[i] = saved;
    const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace stnlab
