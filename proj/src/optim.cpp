#include "paln/optim.hpp"

#include "paln/error.hpp"

#include <cmath>

namespace paln {

AdamState make_adam_state(std::span<Matrix* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adam_update(std::span<Matrix* const> params, std::span<const Matrix* const> grads, AdamState& state, double lr,
                 const AdamConfig& config) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("Adam: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->rows() != params[i]->rows() || grads[i]->cols() != params[i]->cols() ||
        state.m[i].rows() != params[i]->rows() || state.m[i].cols() != params[i]->cols())
      throw ShapeError("Adam: gradient shape does not match its parameter");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = *grads[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseAbs2();
    params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps);
  }
}

}  // namespace paln
