#include "usrf/optim.hpp"

#include <cmath>

#include "usrf/error.hpp"

namespace usrf {

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const Parameter* p : params) {
    s.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

double global_grad_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
  if (params.size() != state.first_moment.size())
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() ||
        state.first_moment[i].rows() != p.value.rows() || state.first_moment[i].cols() != p.value.cols())
      throw DimensionError("adam_step: shape mismatch for " + p.name);
    if (!p.grad.allFinite()) throw NumericalError("adam_step: non-finite gradient for " + p.name);
  }

  const AdamConfig& c = state.config;
  double clip_scale = 1.0;
  if (c.clip_norm > 0.0) {
    const double norm = global_grad_norm(params);
    if (norm > c.clip_norm) clip_scale = c.clip_norm / norm;
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix g = p.grad * clip_scale;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
    p.value.array() -= c.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

}  // namespace usrf
