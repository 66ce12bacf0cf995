#pragma once

// Shared test oracles: finite-difference gradients, a dense masked-attention
// reference for the graph layer, and a small simulate-and-ingest helper.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "usrf/encoders.hpp"
#include "usrf/simulator.hpp"
#include "usrf/telemetry.hpp"

namespace usrf::test {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

/// ||a − n|| / max(||a||, ||n||, floor)
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& n, double floor = 1e-7) {
  const double denom = std::max({a.norm(), n.norm(), floor});
  return (a - n).norm() / denom;
}

struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;
  std::size_t coords = 0;
};

using LossFn = std::function<Tensor(Tape&, const std::vector<Tensor>& inputs)>;

/// Reverse-mode gradients of every parameter in `store` and every input
/// against central differences with step h. With max_coords > 0 only that
/// many randomly chosen entries per tensor are compared. A tensor whose
/// analytic and numeric gradients are both below the roundoff level of the
/// central difference (about |loss|·ε_machine/h per entry) counts as an exact
/// zero: attention key biases have an identically zero gradient, and their
/// numeric side is pure rounding noise.
inline GradCheckResult grad_check(ParameterStore& store, std::vector<Matrix> inputs, const LossFn& loss_fn,
                                  double h = 1e-5, std::size_t max_coords = 0, Rng* rng = nullptr) {
  std::vector<Matrix> analytic_inputs;
  {
    Tape tape;
    std::vector<Tensor> vars;
    for (const auto& m : inputs) vars.push_back(tape.variable(m));
    const Tensor loss = loss_fn(tape, vars);
    store.zero_grad();
    tape.backward(loss);
    for (const auto& v : vars) analytic_inputs.push_back(v.grad());
  }
  auto evaluate = [&]() {
    Tape tape;
    tape.set_finite_checks(false);
    std::vector<Tensor> vars;
    for (const auto& m : inputs) vars.push_back(tape.variable(m));
    return loss_fn(tape, vars).item();
  };

  const double roundoff = 16.0 * std::max(1.0, std::abs(evaluate())) * std::numeric_limits<double>::epsilon() / h;
  GradCheckResult result;
  auto check = [&](Matrix& target, const Matrix& analytic, const std::string& name) {
    std::vector<Index> coords(static_cast<std::size_t>(target.size()));
    for (Index i = 0; i < target.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      rng->shuffle(coords.begin(), coords.end());
      coords.resize(max_coords);
    }
    Eigen::VectorXd a(static_cast<Index>(coords.size())), n(static_cast<Index>(coords.size()));
    for (std::size_t c = 0; c < coords.size(); ++c) {
      double& v = target.data()[coords[c]];
      const double saved = v;
      v = saved + h;
      const double up = evaluate();
      v = saved - h;
      const double down = evaluate();
      v = saved;
      n(static_cast<Index>(c)) = (up - down) / (2.0 * h);
      a(static_cast<Index>(c)) = analytic.size() ? analytic.data()[coords[c]] : 0.0;
    }
    const double floor = roundoff * std::sqrt(static_cast<double>(coords.size()));
    const double rel = a.norm() < floor && n.norm() < floor ? 0.0 : relative_error(a, n);
    result.coords += coords.size();
    if (rel >= result.max_rel) {
      result.max_rel = rel;
      result.worst = name;
    }
  };
  for (Parameter* p : store.all()) {
    const Matrix analytic = p->grad;
    check(p->value, analytic, p->name);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) check(inputs[i], analytic_inputs[i], "input" + std::to_string(i));
  return result;
}

/// Reference graph-attention layer: every target attends over all nodes with
/// non-edges masked to −∞, then residual and layer norm, by plain loops.
inline Matrix dense_masked_layer(const GraphTransformerLayer& layer, const Matrix& h, const Matrix& edge_feats,
                                 const Topology& topo, bool reverse) {
  const Index n = h.rows();
  const Index d = h.cols();
  const Index heads = layer.heads;
  const Index dh = d / heads;
  auto lin = [](const Linear& l, const Matrix& x) {
    Matrix y = x * l.weight->value;
    if (l.bias) y.rowwise() += l.bias->value.row(0);
    return y;
  };
  const Matrix q = lin(layer.query, h), k = lin(layer.key, h), v = lin(layer.value, h);

  // adjacency[i][j]: edge index of the message j -> i, -1 if none, -2 for the self term.
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n), std::vector<Index>(static_cast<std::size_t>(n), -1));
  for (Index e = 0; e < topo.num_edges(); ++e) {
    const Edge& ed = topo.edges()[static_cast<std::size_t>(e)];
    const Index from = reverse ? ed.destination : ed.source;
    const Index to = reverse ? ed.source : ed.destination;
    adj[static_cast<std::size_t>(to)][static_cast<std::size_t>(from)] = e;
  }
  for (Index i = 0; i < n; ++i) {
    bool any = false;
    for (Index j = 0; j < n; ++j) any = any || adj[i][j] >= 0;
    if (!any) adj[i][i] = -2;
  }
  Matrix ek = Matrix::Zero(topo.num_edges(), d), ev = Matrix::Zero(topo.num_edges(), d);
  if (layer.edge_dim > 0 && topo.num_edges() > 0) {
    ek = edge_feats * layer.edge_key.weight->value;
    ev = edge_feats * layer.edge_value.weight->value;
  }
  Matrix agg = Matrix::Zero(n, d);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) {
    for (Index hd = 0; hd < heads; ++hd) {
      std::vector<double> score(static_cast<std::size_t>(n), ninf);
      for (Index j = 0; j < n; ++j) {
        const Index a = adj[i][j];
        if (a == -1) continue;
        double s = 0.0;
        for (Index c = hd * dh; c < (hd + 1) * dh; ++c) {
          const double kj = k(j, c) + (a >= 0 ? ek(a, c) : layer.self_key->value(0, c));
          s += q(i, c) * kj;
        }
        score[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double s : score) z += std::exp(s - mx);
      for (Index j = 0; j < n; ++j) {
        const Index a = adj[i][j];
        if (a == -1) continue;
        const double w = std::exp(score[static_cast<std::size_t>(j)] - mx) / z;
        for (Index c = hd * dh; c < (hd + 1) * dh; ++c)
          agg(i, c) += w * (v(j, c) + (a >= 0 ? ev(a, c) : layer.self_value->value(0, c)));
      }
    }
  }
  Matrix x = h + agg;
  Matrix out(n, d);
  for (Index i = 0; i < n; ++i) {
    double mean = 0.0;
    for (Index c = 0; c < d; ++c) mean += x(i, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Index c = 0; c < d; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= static_cast<double>(d);
    for (Index c = 0; c < d; ++c)
      out(i, c) = (x(i, c) - mean) / std::sqrt(var + 1e-5) * layer.norm.gain->value(0, c) + layer.norm.bias->value(0, c);
  }
  return out;
}

/// Random directed graph without self-loops or duplicate edges.
inline Topology random_topology(Index nodes, double density, Rng& rng) {
  std::vector<std::string> names;
  for (Index i = 0; i < nodes; ++i) names.push_back("s" + std::to_string(i));
  std::vector<Edge> edges;
  for (Index i = 0; i < nodes; ++i)
    for (Index j = 0; j < nodes; ++j)
      if (i != j && rng.uniform() < density) edges.push_back({i, j});
  return Topology(names, edges);
}

/// Simulate a cluster under `profile` and aggregate into (30 s, 5 s) windows.
inline IngestResult simulate_and_ingest(const ClusterSpec& spec, const IntensityProfile& profile, double duration,
                                        std::uint64_t seed, const WindowSpec& window = {}) {
  Rng rng(seed);
  std::vector<double> weights;
  for (const auto& r : spec.requests) weights.push_back(r.weight);
  const auto arrivals = sample_workload(profile, weights, rng);
  const SimResult sim = run_simulation(spec, arrivals, duration, seed);
  IngestOptions opts;
  opts.window = window;
  return build_snapshots(sim.telemetry.samples(), sim.latencies, spec.topology, opts);
}

inline IntensityProfile plateau(double duration, double rate) {
  IntensityProfile p;
  p.segments.push_back({SegmentKind::Plateau, duration, rate, rate});
  return p;
}

}  // namespace usrf::test
