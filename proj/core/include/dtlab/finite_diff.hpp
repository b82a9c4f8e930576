#pragma once

#include <functional>

#include "dtlab/tensor.hpp"

// Central-difference gradient check. The numeric side runs the function
// forward-only (no record), so it stays independent of the backward
// pass it is checking.

namespace dtlab {

// f must be scalar-valued and deterministic (dropout off). Returns the
// max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double epsilon = 1e-5) {
  Tensor probe = x;
  probe.set_requires_grad(true);
  probe.zero_grad();
  ComputationRecord rec;
  {
    RecordScope scope(rec);
    Tensor loss = f(probe);
    rec.backward(loss);
  }
  const std::vector<double> analytic = probe.grad();

  Tensor xeval(x.shape(), x.data());
  double max_err = 0.0;
  for (size_t i = 0; i < xeval.data().size(); ++i) {
    const double orig = xeval.data()[i];
    xeval.data()[i] = orig + epsilon;
    const double fp = f(xeval).value();
    xeval.data()[i] = orig - epsilon;
    const double fm = f(xeval).value();
    xeval.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

// Same check against every parameter of a store; f is re-run forward
// per coordinate with the perturbed parameter in place.
inline double finite_diff_check_params(const std::function<Tensor()>& f, ParamStore& params,
                                       double epsilon = 1e-5) {
  params.zero_grads();
  ComputationRecord rec;
  {
    RecordScope scope(rec);
    Tensor loss = f();
    rec.backward(loss);
  }
  double max_err = 0.0;
  for (auto& [name, t] : params.items()) {
    const std::vector<double> analytic = t.grad();
    auto& data = t.data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + epsilon;
      const double fp = f().value();
      data[i] = orig - epsilon;
      const double fm = f().value();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace dtlab
