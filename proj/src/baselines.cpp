#include <iostream>

#include "usrf/error.hpp"
#include "usrf/training.hpp"

namespace usrf {

double LinearBaseline::predict(const Snapshot& s) const {
  const Eigen::RowVectorXd f = flatten_features(s);
  if (f.size() != weights.size()) throw DimensionError("linear baseline: feature length mismatch");
  return f.dot(weights) + intercept;
}

LinearBaseline fit_linear(std::span<const Snapshot> train, double ridge) {
  if (train.empty()) throw EmptyResultError("linear baseline: no training snapshots");
  const std::vector<double> y = labels_of(train);
  const Index p = flatten_features(train.front()).size();
  const auto n = static_cast<Index>(train.size());
  Eigen::MatrixXd a(n, p + 1);
  Eigen::VectorXd b(n);
  for (Index i = 0; i < n; ++i) {
    a.row(i).head(p) = flatten_features(train[static_cast<std::size_t>(i)]);
    a(i, p) = 1.0;
    b(i) = y[static_cast<std::size_t>(i)];
  }
  Eigen::MatrixXd normal = a.transpose() * a;
  normal.diagonal().head(p).array() += ridge;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  LinearBaseline out;
  const Eigen::VectorXd d = ldlt.vectorD();
  const double scale = std::max(1.0, d.cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || d.cwiseAbs().minCoeff() <= 1e3 * ridge * scale) {
    out.damped_warning = true;
    std::cerr << "warning: normal matrix is near-singular; the solution relies on ridge damping\n";
  }
  const Eigen::VectorXd w = ldlt.solve(a.transpose() * b);
  if (!w.allFinite()) throw NumericalError("linear baseline: non-finite solution");
  out.weights = w.head(p);
  out.intercept = w(p);
  return out;
}

MlpBaseline::MlpBaseline(Index input_dim, const MlpBaselineConfig& cfg) {
  Rng rng(cfg.seed);
  layers_.push_back(Linear::create(store_, "mlp.0", input_dim, cfg.hidden, rng));
  layers_.push_back(Linear::create(store_, "mlp.1", cfg.hidden, cfg.hidden, rng));
  layers_.push_back(Linear::create(store_, "mlp.2", cfg.hidden, 1, rng));
}

Tensor MlpBaseline::predict_batch(const ForwardContext& ctx, std::span<const Snapshot* const> snaps) const {
  Tape& tape = *ctx.tape;
  Matrix flat(static_cast<Index>(snaps.size()), layers_[0].in_features());
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    const Eigen::RowVectorXd f = flatten_features(*snaps[i]);
    if (f.size() != flat.cols()) throw DimensionError("MLP baseline: feature length mismatch");
    flat.row(static_cast<Index>(i)) = f;
  }
  Tensor h = gelu(layers_[0](tape, tape.constant(std::move(flat))));
  h = gelu(layers_[1](tape, h));
  return softplus(layers_[2](tape, h));
}

namespace {

struct PreparedSplit {
  DatasetSplit raw;
  std::vector<Snapshot> train, val;
  NormStats norm;
};

PreparedSplit prepare(const Dataset& ds, const SplitFractions& f) {
  ds.validate();
  PreparedSplit p;
  p.raw = chronological_split(ds, f);
  p.norm = fit_normalizer(p.raw.train);
  p.train = apply_normalizer(p.raw.train, p.norm);
  p.val = apply_normalizer(p.raw.val, p.norm);
  return p;
}

}  // namespace

TrainReport linear_regression(const Dataset& ds, const SplitFractions& split) {
  const PreparedSplit p = prepare(ds, split);
  const LinearBaseline lin = fit_linear(p.train);
  auto run = [&](std::span<const Snapshot> snaps) {
    std::vector<double> y_hat;
    for (const auto& s : snaps) y_hat.push_back(lin.predict(s));
    return y_hat;
  };
  TrainReport rep;
  rep.variant = "linear";
  rep.parameter_count = static_cast<std::size_t>(lin.weights.size() + 1);
  rep.num_train = p.raw.train.size();
  rep.num_val = p.raw.val.size();
  rep.num_test = p.raw.test.size();
  rep.train_metrics = compute_metrics(run(p.train), labels_of(p.raw.train));
  if (!p.val.empty()) rep.val_metrics = compute_metrics(run(p.val), labels_of(p.raw.val));
  ++rep.test_split_reads;
  const std::vector<Snapshot> test = apply_normalizer(p.raw.test, p.norm);
  rep.test_metrics = compute_metrics(run(test), labels_of(p.raw.test));
  return rep;
}

TrainReport mlp_baseline(const Dataset& ds, const MlpBaselineConfig& mcfg, const TrainConfig& cfg) {
  const PreparedSplit p = prepare(ds, cfg.split);
  MlpBaseline mlp(flatten_features(p.train.front()).size(), mcfg);
  const FitResult fr = fit(mlp, p.train, p.val, cfg);
  TrainReport rep;
  rep.variant = "mlp";
  rep.seed = cfg.seed;
  rep.parameter_count = mlp.parameters().scalar_count();
  rep.num_train = p.raw.train.size();
  rep.num_val = p.raw.val.size();
  rep.num_test = p.raw.test.size();
  rep.history = fr.history;
  rep.best_epoch = fr.best_epoch;
  rep.best_val_loss = fr.best_loss;
  rep.train_metrics = compute_metrics(predict(mlp, p.train, cfg.eval_batch), labels_of(p.raw.train));
  if (!p.val.empty()) rep.val_metrics = compute_metrics(predict(mlp, p.val, cfg.eval_batch), labels_of(p.raw.val));
  ++rep.test_split_reads;
  const std::vector<Snapshot> test = apply_normalizer(p.raw.test, p.norm);
  rep.test_metrics = compute_metrics(predict(mlp, test, cfg.eval_batch), labels_of(p.raw.test));
  return rep;
}

}  // namespace usrf
