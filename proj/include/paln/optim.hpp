#pragma once

#include "paln/types.hpp"

#include <span>
#include <vector>

namespace paln {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
struct AdamState {
  std::size_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

AdamState make_adam_state(std::span<Matrix* const> params);

/// One Adam update of every parameter in place. Shapes must match the state.
void adam_update(std::span<Matrix* const> params, std::span<const Matrix* const> grads, AdamState& state, double lr,
                 const AdamConfig& config);

}  // namespace paln
