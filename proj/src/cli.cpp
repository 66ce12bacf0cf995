#include "usrf/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "usrf/checkpoint.hpp"
#include "usrf/error.hpp"
#include "usrf/simulator.hpp"
#include "usrf/telemetry.hpp"
#include "usrf/training.hpp"

namespace usrf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  return out;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_file(path));
    if (!j.is_object()) throw InputError("config file must hold a JSON object: " + path);
    return j;
  } catch (const json::exception& ex) {
    throw InputError("config file " + path + ": " + ex.what());
  }
}

// flag > config file > default
template <typename T>
T resolve(const CLI::Option* opt, const T& flag_value, const json& file, const char* key, const T& fallback) {
  if (opt && opt->count() > 0) return flag_value;
  if (file.contains(key)) {
    try {
      return file.at(key).get<T>();
    } catch (const json::exception& ex) {
      throw InputError(std::string("config key '") + key + "': " + ex.what());
    }
  }
  return fallback;
}

std::string metrics_line(const Metrics& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << "MAE " << m.mae << " s  RMSE " << m.rmse << " s  MAPE "
     << std::setprecision(3) << m.mape << " %";
  return os.str();
}

json metrics_json(const Metrics& m) { return {{"mae_s", m.mae}, {"rmse_s", m.rmse}, {"mape_pct", m.mape}}; }

struct LabelStats {
  std::size_t count = 0;
  double min = 0, max = 0, mean = 0, std = 0, q1 = 0, median = 0, q3 = 0;
};

// Quartiles by linear interpolation between order statistics, sample std.
LabelStats label_stats(std::vector<double> ms) {
  LabelStats s;
  s.count = ms.size();
  if (ms.empty()) return s;
  std::sort(ms.begin(), ms.end());
  const auto n = static_cast<double>(ms.size());
  s.min = ms.front();
  s.max = ms.back();
  double sum = 0.0;
  for (double v : ms) sum += v;
  s.mean = sum / n;
  double ss = 0.0;
  for (double v : ms) ss += (v - s.mean) * (v - s.mean);
  s.std = ms.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (ms[hi] - ms[lo]) * (pos - static_cast<double>(lo));
  };
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  return s;
}

std::string replace_extension(const std::string& path, const std::string& ext) {
  fs::path p(path);
  p.replace_extension(ext);
  return p.string();
}

DatasetSplit select_split(const Dataset& ds, const std::string& which, std::span<const Snapshot>& out) {
  const DatasetSplit split = chronological_split(ds);
  if (which == "train")
    out = split.train;
  else if (which == "val")
    out = split.val;
  else if (which == "test")
    out = split.test;
  else if (which == "all")
    out = ds.snapshots;
  else
    throw InputError("unknown split: " + which);
  return split;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"usrfnet: window-level tail latency prediction for microservice graphs"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run a scenario and write telemetry, latencies and topology");
  std::string scenario_path, sim_out;
  std::uint64_t sim_seed = 0;
  sim->add_option("--scenario", scenario_path, "Scenario JSON file")->required();
  sim->add_option("--out", sim_out, "Output directory")->required();
  auto* sim_seed_opt = sim->add_option("--seed", sim_seed, "Override the scenario seed");

  // ingest
  auto* ing = app.add_subcommand("ingest", "Aggregate telemetry into a windowed dataset");
  std::string telemetry_dir, topology_path, ingest_out, ingest_report;
  double window_length = 30.0, window_stride = 5.0;
  bool ingest_strict = false;
  ing->add_option("--telemetry", telemetry_dir, "Directory with telemetry.prom and latency.csv")->required();
  ing->add_option("--topology", topology_path, "Topology JSON (default: <telemetry>/topology.json)");
  ing->add_option("--out", ingest_out, "Dataset file (default: <telemetry>/dataset.jsonl)");
  ing->add_option("--report", ingest_report, "Ingestion report JSON");
  ing->add_option("--window-length", window_length, "Window length, seconds")->capture_default_str();
  ing->add_option("--window-stride", window_stride, "Window stride, seconds")->capture_default_str();
  ing->add_flag("--strict", ingest_strict, "Fail on the first malformed line or unknown series");

  // train
  auto* tr = app.add_subcommand("train", "Train a model variant and write a checkpoint and report");
  std::string train_dataset, train_ckpt, train_report, train_config, train_variant = "full";
  std::uint64_t train_seed = 1;
  std::size_t epochs = 500, batch_size = 32, checkpoint_every = 0;
  double lr = 1e-3, clip_norm = 0.0, alpha_l = 8.0, alpha_r = 4.0, theta_l = 0.2, theta_r = 0.2, dropout = 0.1;
  Index d_emb = 16, layers = 4, blocks = 4, rank = 4, tokens = 4, heads = 4;
  bool continuous_loss = false, reverse_messages = false, sockshop_sized = false, train_strict = false;
  tr->add_option("--dataset", train_dataset, "Dataset file")->required();
  tr->add_option("--checkpoint", train_ckpt, "Output checkpoint")->required();
  tr->add_option("--report", train_report, "Report JSON (default: <checkpoint>.report.json)");
  tr->add_option("--config", train_config, "JSON file with defaults for any flag below");
  auto* o_variant = tr->add_option("--variant", train_variant,
                                   "full|traffic_only|resource_only|simple_fused|gnn_fused|single_stream");
  auto* o_seed = tr->add_option("--seed", train_seed);
  auto* o_epochs = tr->add_option("--epochs", epochs);
  auto* o_batch = tr->add_option("--batch-size", batch_size);
  auto* o_lr = tr->add_option("--lr", lr);
  auto* o_clip = tr->add_option("--clip-norm", clip_norm);
  auto* o_al = tr->add_option("--alpha-l", alpha_l);
  auto* o_ar = tr->add_option("--alpha-r", alpha_r);
  auto* o_tl = tr->add_option("--theta-l", theta_l);
  auto* o_tr = tr->add_option("--theta-r", theta_r);
  auto* o_cont = tr->add_flag("--continuous-loss", continuous_loss, "Continuity-corrected loss branches");
  auto* o_demb = tr->add_option("--d-emb", d_emb);
  auto* o_layers = tr->add_option("--layers", layers, "Graph layers (traffic side)");
  auto* o_blocks = tr->add_option("--blocks", blocks, "gMLP blocks (resource side)");
  auto* o_rank = tr->add_option("--rank", rank, "HIDAC fusion rank");
  auto* o_tokens = tr->add_option("--tokens", tokens, "Cross-attention tokens per embedding");
  auto* o_heads = tr->add_option("--heads", heads);
  auto* o_dropout = tr->add_option("--dropout", dropout);
  auto* o_rev = tr->add_flag("--reverse-messages", reverse_messages, "Pass messages callee -> caller");
  auto* o_sock = tr->add_flag("--sockshop-defaults", sockshop_sized, "Use the 13-service hyperparameter column");
  auto* o_ckev = tr->add_option("--checkpoint-every", checkpoint_every, "Also write <checkpoint>.epochN every N epochs");
  tr->add_flag("--strict", train_strict, "Reject unknown keys in the dataset file");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_dataset, eval_ckpt, eval_split = "test", eval_preds, eval_report;
  bool eval_strict = false;
  ev->add_option("--dataset", eval_dataset)->required();
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--split", eval_split, "train|val|test|all")->capture_default_str();
  ev->add_option("--predictions", eval_preds, "Prediction CSV (window_start,y,y_hat)");
  ev->add_option("--report", eval_report, "Metrics JSON");
  ev->add_flag("--strict", eval_strict);

  // predict
  auto* pr = app.add_subcommand("predict", "Print the predicted P95 latency (seconds) of each snapshot");
  std::string pred_dataset, pred_ckpt;
  bool pred_strict = false;
  auto* pd = pr->add_option("--snapshot", pred_dataset, "Dataset-format file with one or more snapshots");
  pr->add_option("--dataset", pred_dataset, "Alias of --snapshot")->excludes(pd);
  pr->add_option("--checkpoint", pred_ckpt)->required();
  pr->add_flag("--strict", pred_strict);

  // export-embedding
  auto* ex = app.add_subcommand("export-embedding", "Write the fused system embedding of each snapshot");
  std::string emb_dataset, emb_ckpt, emb_out;
  bool emb_strict = false;
  ex->add_option("--dataset", emb_dataset)->required();
  ex->add_option("--checkpoint", emb_ckpt)->required();
  ex->add_option("--out", emb_out, "Embedding CSV")->required();
  ex->add_flag("--strict", emb_strict);

  // baseline
  auto* bl = app.add_subcommand("baseline", "Fit a flat-feature baseline (linear or mlp)");
  std::string bl_dataset, bl_kind = "linear", bl_report;
  std::uint64_t bl_seed = 1;
  std::size_t bl_epochs = 500;
  bl->add_option("--dataset", bl_dataset)->required();
  bl->add_option("--kind", bl_kind, "linear|mlp")->capture_default_str();
  bl->add_option("--report", bl_report);
  bl->add_option("--seed", bl_seed);
  bl->add_option("--epochs", bl_epochs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }

  try {
    if (sim->parsed()) {
      Scenario sc = load_scenario(scenario_path);
      if (sim_seed_opt->count() > 0) sc.seed = sim_seed;
      Rng workload_rng(sc.seed);
      std::vector<double> weights;
      for (const auto& r : sc.cluster.requests) weights.push_back(r.weight);
      const auto arrivals = sample_workload(sc.profile, weights, workload_rng);
      const SimResult res = run_simulation(sc.cluster, arrivals, sc.duration, sc.seed);
      fs::create_directories(sim_out);
      {
        auto f = open_out((fs::path(sim_out) / "telemetry.prom").string());
        res.telemetry.write_exposition(f);
      }
      {
        auto f = open_out((fs::path(sim_out) / "latency.csv").string());
        write_latency_csv(f, res.latencies);
      }
      save_topology((fs::path(sim_out) / "topology.json").string(), sc.cluster.topology);
      out << "simulated " << format_double(sc.duration) << " s, seed " << sc.seed << '\n'
          << "requests arrived   " << res.arrivals << '\n'
          << "requests completed " << res.completed << '\n'
          << "scrapes            " << res.telemetry.times.size() << '\n'
          << "saturated intervals " << res.saturated_intervals.size() << '\n';
      return kOk;
    }

    if (ing->parsed()) {
      const fs::path dir(telemetry_dir);
      if (topology_path.empty()) topology_path = (dir / "topology.json").string();
      if (ingest_out.empty()) ingest_out = (dir / "dataset.jsonl").string();
      IngestOptions opts;
      opts.window = {window_length, window_stride};
      opts.window.validate();
      opts.strict = ingest_strict;
      const Topology topo = load_topology(topology_path);
      const ParseResult parsed = parse_exposition(read_file((dir / "telemetry.prom").string()), {ingest_strict});
      for (const auto& e : parsed.errors) err << "warning: skipped " << e << '\n';
      std::ifstream lat((dir / "latency.csv").string());
      if (!lat) throw InputError("cannot open " + (dir / "latency.csv").string());
      const auto latencies = read_latency_csv(lat);
      IngestResult res = build_snapshots(parsed.samples, latencies, topo, opts);
      if (res.dataset.snapshots.empty()) throw EmptyResultError("no complete window in the telemetry");
      save_dataset(ingest_out, res.dataset);

      std::vector<double> ms;
      for (const auto& s : res.dataset.snapshots) ms.push_back(*s.label * 1000.0);
      const LabelStats st = label_stats(ms);
      out << "windows            " << res.windows_total << '\n'
          << "snapshots          " << res.dataset.snapshots.size() << '\n'
          << "dropped (metrics)  " << res.dropped_missing_metrics << '\n'
          << "dropped (latency)  " << res.dropped_no_latency << '\n'
          << "skipped lines      " << parsed.skipped << '\n'
          << "P95 label statistics (ms)\n"
          << std::fixed << std::setprecision(3) << "  Count        " << st.count << '\n'
          << "  Min          " << st.min << '\n'
          << "  Max          " << st.max << '\n'
          << "  Mean         " << st.mean << '\n'
          << "  Std          " << st.std << '\n'
          << "  Q1           " << st.q1 << '\n'
          << "  Median (Q2)  " << st.median << '\n'
          << "  Q3           " << st.q3 << '\n'
          << std::defaultfloat;
      if (!ingest_report.empty()) {
        const json rep = {{"windows_total", res.windows_total},
                          {"snapshots", res.dataset.snapshots.size()},
                          {"dropped_missing_metrics", res.dropped_missing_metrics},
                          {"dropped_no_latency", res.dropped_no_latency},
                          {"skipped_lines", parsed.skipped},
                          {"unknown_series_samples", res.unknown_series_samples},
                          {"ignored_samples", res.ignored_samples},
                          {"label_ms",
                           {{"count", st.count},
                            {"min", st.min},
                            {"max", st.max},
                            {"mean", st.mean},
                            {"std", st.std},
                            {"q1", st.q1},
                            {"median", st.median},
                            {"q3", st.q3}}}};
        open_out(ingest_report) << rep.dump(2) << '\n';
      }
      return kOk;
    }

    if (tr->parsed()) {
      const json file = load_config(train_config);
      const Dataset ds = load_dataset(train_dataset, {train_strict});
      const Variant variant = parse_variant(resolve(o_variant, train_variant, file, "variant", std::string("full")));
      const bool sock = resolve(o_sock, sockshop_sized, file, "sockshop_defaults", false);
      ModelConfig mc = default_model_config(variant, ds.topology, ds.schema, sock);
      mc.traffic.d_emb = mc.resource.d_emb = mc.hidac.d_emb =
          resolve(o_demb, d_emb, file, "d_emb", mc.traffic.d_emb);
      mc.resource.d_model = mc.traffic.d_emb;
      mc.traffic.num_layers = resolve(o_layers, layers, file, "layers", mc.traffic.num_layers);
      mc.resource.num_blocks = resolve(o_blocks, blocks, file, "blocks", mc.resource.num_blocks);
      mc.hidac.rank = resolve(o_rank, rank, file, "rank", mc.hidac.rank);
      mc.hidac.tokens = resolve(o_tokens, tokens, file, "tokens", mc.hidac.tokens);
      mc.traffic.heads = resolve(o_heads, heads, file, "heads", mc.traffic.heads);
      mc.traffic.dropout = mc.resource.dropout = resolve(o_dropout, dropout, file, "dropout", mc.traffic.dropout);
      mc.traffic.reverse_messages = resolve(o_rev, reverse_messages, file, "reverse_messages", false);
      const TrafficEncoderConfig base_graph = mc.traffic;
      mc.resource_graph = base_graph;
      mc.resource_graph.node_dim = ds.schema.resource_dim;
      mc.resource_graph.edge_dim = 0;
      mc.validate();

      TrainConfig tc;
      tc.seed = resolve(o_seed, train_seed, file, "seed", tc.seed);
      tc.epochs = resolve(o_epochs, epochs, file, "epochs", tc.epochs);
      tc.batch_size = resolve(o_batch, batch_size, file, "batch_size", tc.batch_size);
      tc.learning_rate = resolve(o_lr, lr, file, "lr", tc.learning_rate);
      tc.clip_norm = resolve(o_clip, clip_norm, file, "clip_norm", tc.clip_norm);
      tc.loss.alpha_l = resolve(o_al, alpha_l, file, "alpha_l", tc.loss.alpha_l);
      tc.loss.alpha_r = resolve(o_ar, alpha_r, file, "alpha_r", tc.loss.alpha_r);
      tc.loss.theta_l = resolve(o_tl, theta_l, file, "theta_l", tc.loss.theta_l);
      tc.loss.theta_r = resolve(o_tr, theta_r, file, "theta_r", tc.loss.theta_r);
      tc.loss.continuous = resolve(o_cont, continuous_loss, file, "continuous_loss", false);
      tc.checkpoint_every = resolve(o_ckev, checkpoint_every, file, "checkpoint_every", std::size_t{0});
      tc.validate();

      if (tc.checkpoint_every > 0) {
        const NormStats norm = fit_normalizer(chronological_split(ds, tc.split).train);
        const std::string meta = checkpoint_meta(mc, ds.topology, ds.schema, norm);
        tc.on_checkpoint = [&train_ckpt, meta](std::size_t epoch, const ParameterStore& store) {
          write_checkpoint(train_ckpt + ".epoch" + std::to_string(epoch), make_checkpoint(meta, store));
        };
      }
      TrainResult res = train(ds, mc, tc);
      save_model(train_ckpt, res.model, ds.schema, res.norm);
      if (train_report.empty()) train_report = train_ckpt + ".report.json";
      json rep = report_to_json(res.report);
      rep["model"] = model_config_to_json(mc);
      open_out(train_report) << rep.dump(2) << '\n';
      {
        auto f = open_out(replace_extension(train_report, ".history.csv"));
        write_history_csv(f, res.report.history);
      }
      out << "variant " << res.report.variant << ", " << res.report.parameter_count << " parameters, "
          << res.report.num_train << "/" << res.report.num_val << "/" << res.report.num_test
          << " train/val/test snapshots\n"
          << "best epoch " << res.report.best_epoch << " of " << res.report.history.size() << ", "
          << std::fixed << std::setprecision(1) << res.report.wall_clock_seconds << " s\n"
          << std::defaultfloat << "test  " << metrics_line(res.report.test_metrics) << '\n';
      return kOk;
    }

    if (ev->parsed()) {
      const LoadedModel lm = load_model(eval_ckpt);
      const Dataset ds = load_dataset(eval_dataset, {eval_strict});
      check_compatible(lm, ds);
      std::span<const Snapshot> snaps;
      select_split(ds, eval_split, snaps);
      if (snaps.empty()) throw EmptyResultError("split '" + eval_split + "' is empty");
      const auto normalized = apply_normalizer(snaps, lm.norm);
      const auto y_hat = predict_latency(lm.model, normalized);
      const Metrics m = compute_metrics(y_hat, labels_of(snaps));
      out << eval_split << "  " << metrics_line(m) << '\n';
      if (!eval_preds.empty()) {
        auto f = open_out(eval_preds);
        write_predictions_csv(f, snaps, y_hat);
      }
      if (!eval_report.empty())
        open_out(eval_report) << json{{"split", eval_split}, {"count", snaps.size()}, {"metrics", metrics_json(m)}}.dump(2)
                              << '\n';
      return kOk;
    }

    if (pr->parsed()) {
      if (pred_dataset.empty()) throw InputError("predict needs --snapshot or --dataset");
      const LoadedModel lm = load_model(pred_ckpt);
      const Dataset ds = load_dataset(pred_dataset, {pred_strict});
      check_compatible(lm, ds);
      if (ds.snapshots.empty()) throw EmptyResultError("no snapshots to predict");
      const auto y_hat = predict_latency(lm.model, apply_normalizer(ds.snapshots, lm.norm));
      for (double y : y_hat) out << format_double(y) << '\n';
      return kOk;
    }

    if (ex->parsed()) {
      const LoadedModel lm = load_model(emb_ckpt);
      const Dataset ds = load_dataset(emb_dataset, {emb_strict});
      check_compatible(lm, ds);
      if (ds.snapshots.empty()) throw EmptyResultError("no snapshots to embed");
      const auto rows = export_embedding(lm.model, apply_normalizer(ds.snapshots, lm.norm));
      auto f = open_out(emb_out);
      write_embedding_csv(f, rows);
      out << "wrote " << rows.size() << " embeddings of width " << (rows.empty() ? 0 : rows.front().z_f.size())
          << " to " << emb_out << '\n';
      return kOk;
    }

    if (bl->parsed()) {
      const Dataset ds = load_dataset(bl_dataset);
      TrainReport rep;
      if (bl_kind == "linear") {
        rep = linear_regression(ds);
      } else if (bl_kind == "mlp") {
        TrainConfig tc;
        tc.seed = bl_seed;
        tc.epochs = bl_epochs;
        rep = mlp_baseline(ds, {64, bl_seed}, tc);
      } else {
        throw InputError("unknown baseline kind: " + bl_kind);
      }
      out << bl_kind << "  test  " << metrics_line(rep.test_metrics) << '\n';
      if (!bl_report.empty()) open_out(bl_report) << report_to_json(rep).dump(2) << '\n';
      return kOk;
    }
  } catch (const ArtifactMismatchError& e) {
    err << "error: artifact mismatch: " << e.what() << '\n';
    return kArtifactMismatch;
  } catch (const NumericalError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const EmptyResultError& e) {
    err << "error: empty result: " << e.what() << '\n';
    return kEmptyResult;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace usrf::cli
