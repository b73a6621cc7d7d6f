#pragma once

#include "airl/tensor.hpp"

#include <cstdint>
#include <vector>

namespace airl {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  AdamOptions options;
};

// Bias-corrected Adam update. Every parameter must carry a gradient; the
// gradients are cleared after the update.
void adam_step(std::vector<Tensor>& params, AdamState& state);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});
  void step() { adam_step(params_, state_); }
  void zero_grad();
  const AdamState& state() const { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

}  // namespace airl
