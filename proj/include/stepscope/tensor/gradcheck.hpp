#pragma once

#include <functional>
#include <vector>

#include "stepscope/tensor/tensor.hpp"

namespace stepscope {

// fn maps the given inputs to a scalar tensor. Inputs should be Float64 for
// a trustworthy comparison (h = 1e-5 central differences).
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  double h = 1e-5;
  // rel err denominator floor per the |a-n| / max(|a|,|n|,floor) definition
  double denom_floor = 1e-8;
};

// Returns the max over all input coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, floor)
// where numeric is the central difference (f(x+h)-f(x-h)) / 2h.
// Throws on NaN anywhere in the evaluation.
double grad_check(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                  const GradCheckOptions& opts = {});

}  // namespace stepscope
