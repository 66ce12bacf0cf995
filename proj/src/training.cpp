#include "usrf/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "usrf/checkpoint.hpp"
#include "usrf/error.hpp"

namespace usrf {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0) throw InputError("epochs must be > 0");
  if (batch_size == 0 || eval_batch == 0) throw InputError("batch size must be > 0");
  if (!(learning_rate > 0.0)) throw InputError("learning rate must be > 0");
  if (clip_norm < 0.0) throw InputError("clip norm must be >= 0");
  loss.validate();
}

Tensor ModelTrainable::predict_batch(const ForwardContext& ctx, std::span<const Snapshot* const> snaps) const {
  return model_.forward(ctx, make_batch(snaps, model_.topology())).prediction;
}

std::vector<double> labels_of(std::span<const Snapshot> snaps) {
  std::vector<double> y;
  y.reserve(snaps.size());
  for (const auto& s : snaps) {
    if (!s.label) throw InputError("snapshot at " + format_double(s.window_start) + " has no label");
    y.push_back(*s.label);
  }
  return y;
}

std::vector<double> predict(const Trainable& model, std::span<const Snapshot> snaps, std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(snaps.size());
  std::vector<const Snapshot*> ptrs;
  for (std::size_t start = 0; start < snaps.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, snaps.size() - start);
    ptrs.clear();
    for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&snaps[start + i]);
    Tape tape;
    const ForwardContext ctx{&tape, false, nullptr};
    const Tensor p = model.predict_batch(ctx, ptrs);
    for (Index i = 0; i < p.rows(); ++i) out.push_back(p.value()(i, 0));
  }
  return out;
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 11);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string parameter_norms(ParameterStore& store) {
  std::ostringstream os;
  os << "parameter norms:";
  for (const Parameter* p : store.all()) os << ' ' << p->name << '=' << p->value.norm();
  return os.str();
}

double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

FitResult fit(Trainable& model, std::span<const Snapshot> train, std::span<const Snapshot> val,
              const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw EmptyResultError("no training snapshots");
  const std::vector<double> train_y = labels_of(train);
  const std::vector<double> val_y = labels_of(val);

  ParameterStore& store = model.parameters();
  const std::vector<Parameter*> params = store.all();
  if (cfg.init_output_bias) {
    if (Parameter* b = model.output_bias()) {
      const double mean_y = std::accumulate(train_y.begin(), train_y.end(), 0.0) / static_cast<double>(train_y.size());
      b->value.setConstant(softplus_inverse(mean_y));
    }
  }
  AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  acfg.clip_norm = cfg.clip_norm;
  AdamState adam = make_adam_state(params, acfg);
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));

  FitResult result;
  std::vector<Matrix> best_values;
  std::vector<std::size_t> order(train.size());
  std::vector<const Snapshot*> batch;
  std::vector<double> batch_y;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      batch.clear();
      batch_y.clear();
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(&train[order[start + i]]);
        batch_y.push_back(train_y[order[start + i]]);
      }
      try {
        Tape tape;
        const ForwardContext ctx{&tape, true, &dropout_rng};
        const Tensor loss = aph_loss(model.predict_batch(ctx, batch), batch_y, cfg.loss);
        if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss");
        store.zero_grad();
        tape.backward(loss);
        adam_step(params, adam);
        loss_sum += loss.item() * static_cast<double>(n);
      } catch (const NumericalError& ex) {
        throw NumericalError(std::string(ex.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index) + "; " + parameter_norms(store));
      }
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(train.size());
    if (!val.empty()) stats.val_loss = mean_aph_loss(predict(model, val, cfg.eval_batch), val_y, cfg.loss);
    const double criterion = stats.val_loss ? *stats.val_loss : stats.train_loss;
    if (!std::isfinite(criterion))
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch) + "; " +
                           parameter_norms(store));
    if (result.best_epoch == 0 || criterion < result.best_loss) {
      result.best_epoch = epoch;
      result.best_loss = criterion;
      best_values = store.values();
    }
    result.history.push_back(stats);
    if (cfg.on_epoch) cfg.on_epoch(stats);
    if (cfg.checkpoint_every > 0 && cfg.on_checkpoint && epoch % cfg.checkpoint_every == 0) cfg.on_checkpoint(epoch, store);
  }
  store.set_values(best_values);
  return result;
}

json report_to_json(const TrainReport& r) {
  auto metrics = [](const Metrics& m) { return json{{"mae_s", m.mae}, {"rmse_s", m.rmse}, {"mape_pct", m.mape}}; };
  json history = json::array();
  for (const auto& e : r.history) {
    json row = {{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    row["val_loss"] = e.val_loss ? json(*e.val_loss) : json(nullptr);
    history.push_back(row);
  }
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"parameter_count", r.parameter_count},
          {"num_train", r.num_train},
          {"num_val", r.num_val},
          {"num_test", r.num_test},
          {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},
          {"train", metrics(r.train_metrics)},
          {"val", metrics(r.val_metrics)},
          {"test", metrics(r.test_metrics)},
          {"history", history}};
}

void write_history_csv(std::ostream& out, std::span<const EpochStats> history) {
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : history)
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << (e.val_loss ? format_double(*e.val_loss) : "")
        << '\n';
}

TrainResult train(const Dataset& ds, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ds.validate();
  const DatasetSplit split = chronological_split(ds, cfg.split);
  const NormStats norm = fit_normalizer(split.train);
  const std::vector<Snapshot> train_n = apply_normalizer(split.train, norm);
  const std::vector<Snapshot> val_n = apply_normalizer(split.val, norm);

  TrainResult result{Model(model_cfg, ds.topology, cfg.seed), norm, {}};
  ModelTrainable trainable(result.model);
  const FitResult fr = fit(trainable, train_n, val_n, cfg);

  TrainReport& rep = result.report;
  rep.variant = variant_name(model_cfg.variant);
  rep.seed = cfg.seed;
  rep.parameter_count = result.model.parameters().scalar_count();
  rep.num_train = split.train.size();
  rep.num_val = split.val.size();
  rep.num_test = split.test.size();
  rep.history = fr.history;
  rep.best_epoch = fr.best_epoch;
  rep.best_val_loss = fr.best_loss;
  rep.train_metrics = compute_metrics(predict(trainable, train_n, cfg.eval_batch), labels_of(split.train));
  if (!val_n.empty())
    rep.val_metrics = compute_metrics(predict(trainable, val_n, cfg.eval_batch), labels_of(split.val));

  // The only read of the test split.
  ++rep.test_split_reads;
  const std::vector<Snapshot> test_n = apply_normalizer(split.test, norm);
  rep.test_metrics = compute_metrics(predict(trainable, test_n, cfg.eval_batch), labels_of(split.test));
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::string checkpoint_meta(const ModelConfig& cfg, const Topology& topo, const FeatureSchema& schema,
                            const NormStats& norm) {
  const json meta = {{"model", model_config_to_json(cfg)},
                     {"topology", topology_to_json(topo)},
                     {"schema", {{"d_n", schema.node_dim}, {"d_e", schema.edge_dim}, {"d_r", schema.resource_dim}}},
                     {"norm", norm_stats_to_json(norm)}};
  return meta.dump();
}

void save_model(const std::string& path, const Model& model, const FeatureSchema& schema, const NormStats& norm) {
  write_checkpoint(path, make_checkpoint(checkpoint_meta(model.config(), model.topology(), schema, norm), model.parameters()));
}

LoadedModel load_model(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  json meta;
  try {
    meta = json::parse(ckpt.meta);
  } catch (const json::exception& ex) {
    throw ParseError(2, std::string("checkpoint meta is not JSON: ") + ex.what());
  }
  try {
    const ModelConfig cfg = model_config_from_json(meta.at("model"));
    const Topology topo = topology_from_json(meta.at("topology"));
    FeatureSchema schema;
    schema.node_dim = meta.at("schema").at("d_n").get<Index>();
    schema.edge_dim = meta.at("schema").at("d_e").get<Index>();
    schema.resource_dim = meta.at("schema").at("d_r").get<Index>();
    LoadedModel lm{Model(cfg, topo, 0), schema, norm_stats_from_json(meta.at("norm"))};
    load_parameters(ckpt, lm.model.parameters());
    return lm;
  } catch (const json::exception& ex) {
    throw ArtifactMismatchError(std::string("checkpoint meta is incomplete: ") + ex.what());
  }
}

void check_compatible(const LoadedModel& m, const Dataset& ds) {
  if (!(ds.topology == m.model.topology()))
    throw ArtifactMismatchError("dataset topology differs from the checkpoint's");
  if (!(ds.schema == m.schema)) throw ArtifactMismatchError("dataset feature schema differs from the checkpoint's");
}

void write_predictions_csv(std::ostream& out, std::span<const Snapshot> snaps, std::span<const double> y_hat) {
  if (snaps.size() != y_hat.size()) throw InputError("prediction count differs from snapshot count");
  out << "window_start,y,y_hat\n";
  for (std::size_t i = 0; i < snaps.size(); ++i)
    out << format_double(snaps[i].window_start) << ',' << (snaps[i].label ? format_double(*snaps[i].label) : "")
        << ',' << format_double(y_hat[i]) << '\n';
}

}  // namespace usrf
