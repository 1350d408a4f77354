#pragma once

#include <vector>

#include "stepscope/tensor/tensor.hpp"

namespace stepscope {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. Moments are allocated lazily to match
// each parameter's shape; step_count increments by exactly 1 per update.
class AdamState {
 public:
  explicit AdamState(AdamHyper hp = {}) : hp_(hp) {}

  // params[i] is updated in place using grads[i].
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);

  int64_t step_count() const { return step_count_; }
  const AdamHyper& hyper() const { return hp_; }
  AdamHyper& hyper() { return hp_; }
  const std::vector<Tensor>& m() const { return m_; }
  const std::vector<Tensor>& v() const { return v_; }

 private:
  AdamHyper hp_;
  int64_t step_count_ = 0;
  std::vector<Tensor> m_, v_;
};

// Single-parameter convenience used by small tests.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

}  // namespace stepscope
