#include "usrf/loss.hpp"

#include <cmath>

#include "usrf/error.hpp"

namespace usrf {

void LossParams::validate() const {
  if (!(theta_l > 0.0) || !(theta_r > 0.0)) throw InputError("loss thresholds must be > 0");
  if (!(alpha_r >= 1.0) || !(alpha_l > alpha_r)) throw InputError("loss slopes must satisfy alpha_l > alpha_r >= 1");
  if (!(eps > 0.0)) throw InputError("loss epsilon must be > 0");
}

double percentage_error(double y_hat, double y, double eps) { return (y_hat - y) / (y + eps); }

double aph_loss(double e, const LossParams& p) {
  if (e < -p.theta_l) {
    if (p.continuous) return p.theta_l * p.alpha_l * (-e - p.theta_l) + p.theta_l * p.theta_l;
    return -p.theta_l * (p.alpha_l * e + p.theta_l);
  }
  if (e < p.theta_r) return e * e;
  if (p.continuous) return p.theta_r * p.alpha_r * (e - p.theta_r) + p.theta_r * p.theta_r;
  return p.theta_r * (p.alpha_r * e - p.theta_r);
}

double aph_loss_derivative(double e, const LossParams& p) {
  if (e < -p.theta_l) return -p.theta_l * p.alpha_l;
  if (e < p.theta_r) return 2.0 * e;
  return p.theta_r * p.alpha_r;
}

Tensor aph_loss(const Tensor& y_hat, std::span<const double> y, const LossParams& p) {
  const Index n = y_hat.rows();
  if (y_hat.cols() != 1 || static_cast<std::size_t>(n) != y.size() || n == 0)
    throw DimensionError("aph_loss: predictions " + shape_string(y_hat.value()) + " vs " +
                         std::to_string(y.size()) + " labels");
  std::vector<double> labels(y.begin(), y.end());
  double total = 0.0;
  Matrix d(n, 1);
  for (Index i = 0; i < n; ++i) {
    const double yi = labels[static_cast<std::size_t>(i)];
    const double e = percentage_error(y_hat.value()(i, 0), yi, p.eps);
    total += aph_loss(e, p);
    d(i, 0) = aph_loss_derivative(e, p) / (yi + p.eps) / static_cast<double>(n);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  const int in = y_hat.id();
  return y_hat.tape().record("aph_loss", std::move(out), {y_hat}, [in, d = std::move(d)](Tape& t, int self) {
    t.accumulate(in, d * t.grad_of(self)(0, 0));
  });
}

double mean_aph_loss(std::span<const double> y_hat, std::span<const double> y, const LossParams& p) {
  if (y_hat.size() != y.size() || y.empty()) throw InputError("mean_aph_loss: mismatched or empty inputs");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) total += aph_loss(percentage_error(y_hat[i], y[i], p.eps), p);
  return total / static_cast<double>(y.size());
}

Metrics compute_metrics(std::span<const double> y_hat, std::span<const double> y) {
  if (y_hat.size() != y.size()) throw InputError("metrics: prediction and label counts differ");
  if (y.empty()) throw InputError("metrics: no samples");
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 0.0) throw InputError("metrics: MAPE undefined for a zero label");
    const double err = y[i] - y_hat[i];
    abs_sum += std::abs(err);
    sq_sum += err * err;
    pct_sum += std::abs(err / y[i]);
  }
  const auto n = static_cast<double>(y.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), 100.0 * pct_sum / n};
}

}  // namespace usrf
