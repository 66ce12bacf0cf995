#pragma once

#include <span>
#include <vector>

#include "usrf/ops.hpp"

namespace usrf {

/// Asymmetric percentage Huber loss. Default slopes penalize under-prediction
/// (e_p < 0) twice as steeply as over-prediction.
struct LossParams {
  double theta_l = 0.2;
  double theta_r = 0.2;
  double alpha_l = 8.0;
  double alpha_r = 4.0;
  double eps = 1e-8;  // seconds
  /// Shift the linear branches so the loss is continuous at ±θ. Off by default.
  bool continuous = false;

  /// θ > 0, α_L > α_R >= 1, ε > 0.
  void validate() const;
};

/// (ŷ − y) / (y + ε)
double percentage_error(double y_hat, double y, double eps);

/// Piecewise loss of a percentage error:
///   e < −θ_L       : −θ_L(α_L e + θ_L)
///   −θ_L <= e < θ_R : e²
///   e >= θ_R        : θ_R(α_R e − θ_R)
double aph_loss(double e, const LossParams& p);
/// Derivative of the active branch.
double aph_loss_derivative(double e, const LossParams& p);

/// Mean loss over a B x 1 prediction column as a 1x1 tape node.
Tensor aph_loss(const Tensor& y_hat, std::span<const double> y, const LossParams& p);
/// Mean loss over plain values.
double mean_aph_loss(std::span<const double> y_hat, std::span<const double> y, const LossParams& p);

struct Metrics {
  double mae = 0.0;   // seconds
  double rmse = 0.0;  // seconds
  double mape = 0.0;  // percent, raw y in the denominator
};

/// Throws InputError on empty or mismatched inputs and on a zero label.
Metrics compute_metrics(std::span<const double> y_hat, std::span<const double> y);

}  // namespace usrf
