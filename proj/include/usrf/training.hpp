#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usrf/fusion.hpp"
#include "usrf/loss.hpp"
#include "usrf/optim.hpp"

namespace usrf {

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double clip_norm = 0.0;
  std::uint64_t seed = 1;
  /// Call on_checkpoint with the current parameters every N epochs when > 0.
  std::size_t checkpoint_every = 0;
  std::function<void(std::size_t epoch, const ParameterStore& current)> on_checkpoint;
  /// Start the head's output bias at softplus⁻¹(mean training label).
  bool init_output_bias = true;
  LossParams loss;
  SplitFractions split;
  std::size_t eval_batch = 128;
  std::function<void(const EpochStats&)> on_epoch;

  void validate() const;
};

/// Anything trained by `fit`: a parameter store and a batched forward pass
/// producing B x 1 positive predictions in seconds.
class Trainable {
 public:
  virtual ~Trainable() = default;
  virtual Tensor predict_batch(const ForwardContext& ctx, std::span<const Snapshot* const> snaps) const = 0;
  virtual ParameterStore& parameters() = 0;
  /// Pre-softplus output bias, if the model has one.
  virtual Parameter* output_bias() = 0;
};

class ModelTrainable : public Trainable {
 public:
  explicit ModelTrainable(Model& m) : model_(m) {}
  Tensor predict_batch(const ForwardContext& ctx, std::span<const Snapshot* const> snaps) const override;
  ParameterStore& parameters() override { return model_.parameters(); }
  Parameter* output_bias() override { return &model_.head_output_bias(); }

 private:
  Model& model_;
};

struct FitResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;  // validation loss, or training loss without a validation set
};

/// Mini-batch Adam over shuffled snapshots (already normalized). Keeps the
/// parameters of the epoch with the lowest validation loss, or the lowest
/// training loss when `val` is empty, and restores them at the end.
/// Throws NumericalError with epoch, batch and parameter norms on a NaN loss.
FitResult fit(Trainable& model, std::span<const Snapshot> train, std::span<const Snapshot> val,
              const TrainConfig& cfg);

/// Predictions in eval mode.
std::vector<double> predict(const Trainable& model, std::span<const Snapshot> snaps, std::size_t batch_size = 128);

std::vector<double> labels_of(std::span<const Snapshot> snaps);

struct TrainReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t parameter_count = 0;
  std::size_t num_train = 0, num_val = 0, num_test = 0;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  Metrics train_metrics;
  Metrics val_metrics;
  Metrics test_metrics;
  std::size_t test_split_reads = 0;
  double wall_clock_seconds = 0.0;  // not serialized, so reports stay byte-stable
};

nlohmann::json report_to_json(const TrainReport& r);
/// epoch,train_loss,val_loss
void write_history_csv(std::ostream& out, std::span<const EpochStats> history);

struct TrainResult {
  Model model;
  NormStats norm;
  TrainReport report;
};

/// Chronological split, normalization fitted on train, fit, then a single
/// evaluation of the test split with the selected parameters.
TrainResult train(const Dataset& ds, const ModelConfig& model_cfg, const TrainConfig& cfg);

/// Checkpoint metadata: model config, topology, schema and normalization.
std::string checkpoint_meta(const ModelConfig& cfg, const Topology& topo, const FeatureSchema& schema,
                            const NormStats& norm);
void save_model(const std::string& path, const Model& model, const FeatureSchema& schema, const NormStats& norm);

struct LoadedModel {
  Model model;
  FeatureSchema schema;
  NormStats norm;
};
LoadedModel load_model(const std::string& path);
/// ArtifactMismatchError unless the dataset's topology and schema equal the model's.
void check_compatible(const LoadedModel& m, const Dataset& ds);

/// CSV: window_start,y,y_hat
void write_predictions_csv(std::ostream& out, std::span<const Snapshot> snaps, std::span<const double> y_hat);

// Flat-vector baselines.

struct LinearBaseline {
  Vector weights;
  double intercept = 0.0;
  bool damped_warning = false;

  double predict(const Snapshot& s) const;
};

/// Least squares with intercept via normal equations, ridge 1e-8 on the weights.
LinearBaseline fit_linear(std::span<const Snapshot> train, double ridge = 1e-8);

struct MlpBaselineConfig {
  Index hidden = 64;
  std::uint64_t seed = 1;
};

/// Flat features -> Linear GELU Linear GELU Linear -> softplus.
class MlpBaseline : public Trainable {
 public:
  MlpBaseline(Index input_dim, const MlpBaselineConfig& cfg);
  Tensor predict_batch(const ForwardContext& ctx, std::span<const Snapshot* const> snaps) const override;
  ParameterStore& parameters() override { return store_; }
  Parameter* output_bias() override { return layers_[2].bias; }

 private:
  ParameterStore store_;
  std::vector<Linear> layers_;
};

/// Baseline runs with the same split and normalization protocol as `train`.
TrainReport linear_regression(const Dataset& ds, const SplitFractions& split = {});
TrainReport mlp_baseline(const Dataset& ds, const MlpBaselineConfig& mcfg, const TrainConfig& cfg);

}  // namespace usrf
