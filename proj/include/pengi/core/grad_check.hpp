#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/tape.hpp"

namespace pengi {

namespace detail {

template <class T>
T relative_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T(1), std::abs(analytic));
}

template <class T, class F>
T scalar_output(F& f, Tape<T>& tape, const Var<T>& x) {
  Var<T> y = f(tape, x);
  if (y.value().size() != 1) {
    throw ContractError("grad_check: function output must be scalar, got " + shape_string(y.value().shape()));
  }
  return y.value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns max |analytic - numeric| / max(1, |analytic|) over all
/// coordinates of x.
///
/// `f` is called as f(Tape<T>&, Var<T> x) -> Var<T>.
template <class T, class F>
T grad_check(F&& f, const Tensor<T>& x, T eps) {
  std::vector<T> analytic;
  {
    Tape<T> tape;
    Var<T> xv = tape.variable(x);
    Var<T> y = f(tape, xv);
    if (y.value().size() != 1) {
      throw ContractError("grad_check: function output must be scalar, got " + shape_string(y.value().shape()));
    }
    tape.backward(y);
    auto g = tape.grad(xv);
    analytic.assign(x.size(), T(0));
    std::copy(g.begin(), g.end(), analytic.begin());
  }
  T worst = 0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    T fp, fm;
    {
      Tape<T> tape;
      fp = detail::scalar_output<T>(f, tape, tape.constant(probe));
    }
    probe[i] = orig - eps;
    {
      Tape<T> tape;
      fm = detail::scalar_output<T>(f, tape, tape.constant(probe));
    }
    probe[i] = orig;
    worst = std::max(worst, detail::relative_error(analytic[i], (fp - fm) / (T(2) * eps)));
  }
  return worst;
}

/// Same check against model parameters. `loss` is called as loss(Tape<T>&) and
/// must bind the parameters with Tape::parameter. At most `max_coords`
/// coordinates per parameter are probed, spread evenly across the tensor.
template <class T, class F>
T grad_check_parameters(F&& loss, std::span<Tensor<T>* const> params, T eps, std::size_t max_coords) {
  for (Tensor<T>* p : params) p->zero_grad();
  {
    Tape<T> tape;
    Var<T> y = loss(tape);
    if (y.value().size() != 1) throw ContractError("grad_check_parameters: loss must be scalar");
    tape.backward(y);
  }
  auto eval = [&] {
    Tape<T> tape;
    return loss(tape).value()[0];
  };
  T worst = 0;
  for (Tensor<T>* p : params) {
    if (!p->requires_grad()) continue;
    std::vector<T> analytic(p->size(), T(0));
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    const std::size_t n = p->size();
    const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_coords));
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = (*p)[i];
      (*p)[i] = orig + eps;
      const T fp = eval();
      (*p)[i] = orig - eps;
      const T fm = eval();
      (*p)[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[i], (fp - fm) / (T(2) * eps)));
    }
  }
  return worst;
}

}  // namespace pengi
