#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "relctr/tensor.hpp"

namespace testutil {

struct GradCheckResult {
  double max_err = 0.0;
  std::size_t checked = 0;
};

// Central-difference check of d(loss)/d(param) for every element of every
// parameter. `make_loss` must rebuild the graph from the current parameter
// values on each call and return a scalar. Error is |analytic - numeric|
// scaled by max(1, |analytic|, |numeric|) so near-zero gradients are held to
// the tolerance in absolute terms.
template <typename LossFn>
GradCheckResult gradcheck(std::vector<relctr::Tensor>& params, LossFn make_loss,
                          double step = 1e-5) {
  GradCheckResult res;
  for (auto& p : params) p.zero_grad();
  {
    relctr::Tensor loss = make_loss();
    relctr::backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      const double up = make_loss().item();
      vals[i] = saved - step;
      const double down = make_loss().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_err = std::max(res.max_err, std::abs(a - numeric) / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testutil
