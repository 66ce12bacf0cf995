#include "usrf/statgraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include "usrf/error.hpp"

namespace usrf {

using nlohmann::json;

Topology::Topology(std::vector<std::string> services, std::vector<Edge> edges, bool allow_self_loops)
    : services_(std::move(services)), edges_(std::move(edges)), allow_self_loops_(allow_self_loops) {
  std::set<std::string> seen_names;
  for (const auto& s : services_) {
    if (s.empty()) throw SchemaError("empty service name");
    if (!seen_names.insert(s).second) throw SchemaError("duplicate service: " + s);
  }
  std::set<std::pair<Index, Index>> seen_edges;
  const Index n = num_services();
  for (const Edge& e : edges_) {
    if (e.source < 0 || e.source >= n || e.destination < 0 || e.destination >= n)
      throw SchemaError("edge index out of range: " + std::to_string(e.source) + "->" + std::to_string(e.destination));
    if (e.source == e.destination && !allow_self_loops_) throw SchemaError("self-loop on " + services_[e.source]);
    if (!seen_edges.insert({e.source, e.destination}).second)
      throw SchemaError("duplicate edge " + services_[e.source] + "->" + services_[e.destination]);
  }
}

Topology Topology::canonical(std::vector<std::string> services,
                             const std::vector<std::pair<std::string, std::string>>& edges, bool allow_self_loops) {
  std::sort(services.begin(), services.end());
  auto lookup = [&](const std::string& name) {
    auto it = std::lower_bound(services.begin(), services.end(), name);
    if (it == services.end() || *it != name) throw SchemaError("edge references unknown service: " + name);
    return static_cast<Index>(it - services.begin());
  };
  std::vector<Edge> idx;
  idx.reserve(edges.size());
  for (const auto& [s, d] : edges) idx.push_back({lookup(s), lookup(d)});
  std::sort(idx.begin(), idx.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.source, a.destination) < std::tie(b.source, b.destination);
  });
  return Topology(std::move(services), std::move(idx), allow_self_loops);
}

std::optional<Index> Topology::service_index(std::string_view name) const {
  for (std::size_t i = 0; i < services_.size(); ++i)
    if (services_[i] == name) return static_cast<Index>(i);
  return std::nullopt;
}

std::optional<Index> Topology::edge_index(Index source, Index destination) const {
  for (std::size_t i = 0; i < edges_.size(); ++i)
    if (edges_[i].source == source && edges_[i].destination == destination) return static_cast<Index>(i);
  return std::nullopt;
}

std::vector<Index> Topology::in_degree() const {
  std::vector<Index> deg(services_.size(), 0);
  for (const Edge& e : edges_) ++deg[e.destination];
  return deg;
}

json topology_to_json(const Topology& topo) {
  json edges = json::array();
  for (const Edge& e : topo.edges())
    edges.push_back(json::array({topo.services()[e.source], topo.services()[e.destination]}));
  json j = {{"services", topo.services()}, {"edges", edges}};
  if (topo.allows_self_loops()) j["allow_self_loops"] = true;
  return j;
}

Topology topology_from_json(const json& j) {
  try {
    auto services = j.at("services").get<std::vector<std::string>>();
    const bool self_loops = j.value("allow_self_loops", false);
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw SchemaError("edge must be a [source, destination] pair");
      auto find = [&](const std::string& name) {
        auto it = std::find(services.begin(), services.end(), name);
        if (it == services.end()) throw SchemaError("edge references unknown service: " + name);
        return static_cast<Index>(it - services.begin());
      };
      edges.push_back({find(e[0].get<std::string>()), find(e[1].get<std::string>())});
    }
    return Topology(std::move(services), std::move(edges), self_loops);
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("bad topology: ") + ex.what());
  }
}

Topology load_topology(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open topology: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw ParseError(1, std::string("topology is not valid JSON: ") + ex.what());
  }
  // Scenario files embed the topology under "topology".
  if (j.contains("topology")) return topology_from_json(j.at("topology"));
  return topology_from_json(j);
}

void save_topology(const std::string& path, const Topology& topo) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write topology: " + path);
  out << topology_to_json(topo).dump(2) << '\n';
}

void validate_snapshot(const Snapshot& s, const Topology& topo, const FeatureSchema& schema) {
  auto check = [](const Matrix& m, Index rows, Index cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols)
      throw SchemaError(std::string(what) + " is " + shape_string(m) + ", expected [" + std::to_string(rows) + "x" +
                        std::to_string(cols) + "]");
    if (!m.allFinite()) throw SchemaError(std::string(what) + " contains non-finite values");
    if ((m.array() < 0.0).any()) throw SchemaError(std::string(what) + " contains negative values");
  };
  check(s.node_features, topo.num_services(), schema.node_dim, "X");
  check(s.edge_features, topo.num_edges(), schema.edge_dim, "E");
  check(s.resource_features, topo.num_services(), schema.resource_dim, "R");
  if (!std::isfinite(s.window_start)) throw SchemaError("non-finite window_start");
  if (s.label && !(std::isfinite(*s.label) && *s.label > 0.0)) throw SchemaError("label must be finite and > 0");
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    validate_snapshot(snapshots[i], topology, schema);
    if (i > 0 && !(snapshots[i].window_start > snapshots[i - 1].window_start))
      throw SchemaError("snapshots are not strictly time-ordered at index " + std::to_string(i));
  }
}

std::array<std::size_t, 3> split_sizes(std::size_t total, const SplitFractions& f) {
  if (!(f.train > 0 && f.val > 0 && f.test > 0)) throw InputError("split fractions must be positive");
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) throw InputError("split fractions must sum to 1");
  if (total < 10) throw EmptyResultError("chronological split needs at least 10 snapshots, got " + std::to_string(total));
  // The small nudge keeps exact products such as 0.7 * 10 from flooring to 6.
  const auto n = static_cast<double>(total);
  const auto train = static_cast<std::size_t>(std::floor(f.train * n + 1e-9));
  const auto val = static_cast<std::size_t>(std::floor(f.val * n + 1e-9));
  return {train, val, total - train - val};
}

DatasetSplit chronological_split(const Dataset& ds, const SplitFractions& f) {
  const auto [ntrain, nval, ntest] = split_sizes(ds.snapshots.size(), f);
  std::span<const Snapshot> all(ds.snapshots);
  return {all.subspan(0, ntrain), all.subspan(ntrain, nval), all.subspan(ntrain + nval, ntest)};
}

namespace {

void column_stats(std::span<const Snapshot> snaps, const Matrix Snapshot::*block, Eigen::RowVectorXd& mean,
                  Eigen::RowVectorXd& stddev) {
  const Index cols = (snaps.front().*block).cols();
  Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(cols);
  double n = 0.0;
  for (const auto& snap : snaps) {
    s += (snap.*block).colwise().sum();
    n += static_cast<double>((snap.*block).rows());
  }
  mean = n > 0 ? Eigen::RowVectorXd(s / n) : Eigen::RowVectorXd::Zero(cols);
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(cols);
  for (const auto& snap : snaps) sq += ((snap.*block).rowwise() - mean).array().square().colwise().sum().matrix();
  stddev = n > 0 ? Eigen::RowVectorXd((sq / n).cwiseSqrt()) : Eigen::RowVectorXd::Ones(cols);
  stddev = stddev.cwiseMax(kStdFloor);
}

Matrix standardize(const Matrix& m, const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& stddev) {
  if (m.cols() != mean.size()) throw DimensionError("normalizer width mismatch");
  return ((m.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
}

}  // namespace

NormStats fit_normalizer(std::span<const Snapshot> train) {
  if (train.empty()) throw EmptyResultError("cannot fit normalizer on an empty split");
  NormStats st;
  column_stats(train, &Snapshot::node_features, st.node_mean, st.node_std);
  column_stats(train, &Snapshot::edge_features, st.edge_mean, st.edge_std);
  column_stats(train, &Snapshot::resource_features, st.resource_mean, st.resource_std);
  return st;
}

Snapshot apply_normalizer(const Snapshot& s, const NormStats& st) {
  Snapshot out = s;
  out.node_features = standardize(s.node_features, st.node_mean, st.node_std);
  if (s.edge_features.rows() > 0) out.edge_features = standardize(s.edge_features, st.edge_mean, st.edge_std);
  out.resource_features = standardize(s.resource_features, st.resource_mean, st.resource_std);
  return out;
}

std::vector<Snapshot> apply_normalizer(std::span<const Snapshot> snaps, const NormStats& stats) {
  std::vector<Snapshot> out;
  out.reserve(snaps.size());
  for (const auto& s : snaps) out.push_back(apply_normalizer(s, stats));
  return out;
}

namespace {

json row_json(const Eigen::RowVectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::RowVectorXd row_from_json(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::RowVectorXd>(v.data(), static_cast<Index>(v.size()));
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, Index expected_cols, const char* what, std::size_t line) {
  if (!j.is_array()) throw ParseError(line, std::string(what) + " must be an array of rows");
  Matrix m(static_cast<Index>(j.size()), expected_cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const json& row = j[r];
    if (!row.is_array() || static_cast<Index>(row.size()) != expected_cols)
      throw SchemaError("line " + std::to_string(line) + ": " + what + " row " + std::to_string(r) + " must have " +
                        std::to_string(expected_cols) + " values");
    for (Index c = 0; c < expected_cols; ++c) {
      if (!row[c].is_number()) throw ParseError(line, std::string(what) + " holds a non-numeric value");
      m(static_cast<Index>(r), c) = row[c].get<double>();
    }
  }
  return m;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, std::size_t line, bool strict,
                std::vector<std::string>* warnings) {
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (known) continue;
    const std::string msg = "line " + std::to_string(line) + ": unknown field '" + key + "'";
    if (strict) throw SchemaError(msg);
    if (warnings)
      warnings->push_back(msg);
    else
      std::cerr << "warning: " << msg << '\n';
  }
}

}  // namespace

json norm_stats_to_json(const NormStats& s) {
  return {{"node_mean", row_json(s.node_mean)},         {"node_std", row_json(s.node_std)},
          {"edge_mean", row_json(s.edge_mean)},         {"edge_std", row_json(s.edge_std)},
          {"resource_mean", row_json(s.resource_mean)}, {"resource_std", row_json(s.resource_std)}};
}

NormStats norm_stats_from_json(const json& j) {
  NormStats s;
  s.node_mean = row_from_json(j.at("node_mean"));
  s.node_std = row_from_json(j.at("node_std"));
  s.edge_mean = row_from_json(j.at("edge_mean"));
  s.edge_std = row_from_json(j.at("edge_std"));
  s.resource_mean = row_from_json(j.at("resource_mean"));
  s.resource_std = row_from_json(j.at("resource_std"));
  return s;
}

void save_dataset(std::ostream& out, const Dataset& ds) {
  json header = topology_to_json(ds.topology);
  header["format"] = "usrfnet-dataset";
  header["version"] = kDatasetVersion;
  header["schema"] = {{"d_n", ds.schema.node_dim}, {"d_e", ds.schema.edge_dim}, {"d_r", ds.schema.resource_dim}};
  out << header.dump() << '\n';
  for (const auto& s : ds.snapshots) {
    json line = {{"window_start", s.window_start},
                 {"X", matrix_json(s.node_features)},
                 {"E", matrix_json(s.edge_features)},
                 {"R", matrix_json(s.resource_features)}};
    if (s.label) line["y"] = *s.label;
    out << line.dump() << '\n';
  }
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write dataset: " + path);
  save_dataset(out, ds);
  if (!out) throw InputError("failed writing dataset: " + path);
}

Dataset load_dataset(std::istream& in, const LoadOptions& opts, std::vector<std::string>* warnings) {
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(1, "empty dataset file");
  ++line_no;
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& ex) {
    throw ParseError(line_no, std::string("header is not valid JSON: ") + ex.what());
  }
  if (!header.is_object() || header.value("format", "") != "usrfnet-dataset")
    throw ParseError(line_no, "missing format tag 'usrfnet-dataset'");
  if (header.value("version", -1) != kDatasetVersion)
    throw SchemaError("unsupported dataset version " + header.value("version", json(-1)).dump());
  check_keys(header, {"format", "version", "services", "edges", "schema", "allow_self_loops"}, line_no, opts.strict,
             warnings);
  ds.topology = topology_from_json(header);
  try {
    const json& sc = header.at("schema");
    ds.schema = {sc.at("d_n").get<Index>(), sc.at("d_e").get<Index>(), sc.at("d_r").get<Index>()};
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("bad schema block: ") + ex.what());
  }
  if (ds.schema.node_dim <= 0 || ds.schema.edge_dim <= 0 || ds.schema.resource_dim <= 0)
    throw SchemaError("feature widths must be positive");

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) {
      const ParseError err(line_no, j.is_discarded() ? "invalid JSON" : "snapshot must be a JSON object");
      if (opts.strict) throw err;
      const std::string msg = std::string("skipped malformed ") + err.what();
      if (warnings)
        warnings->push_back(msg);
      else
        std::cerr << "warning: " << msg << '\n';
      continue;
    }
    check_keys(j, {"window_start", "X", "E", "R", "y"}, line_no, opts.strict, warnings);
    Snapshot s;
    try {
      s.window_start = j.at("window_start").get<double>();
      s.node_features = matrix_from_json(j.at("X"), ds.schema.node_dim, "X", line_no);
      s.edge_features = matrix_from_json(j.at("E"), ds.schema.edge_dim, "E", line_no);
      s.resource_features = matrix_from_json(j.at("R"), ds.schema.resource_dim, "R", line_no);
      if (j.contains("y") && !j.at("y").is_null()) s.label = j.at("y").get<double>();
    } catch (const json::exception& ex) {
      throw ParseError(line_no, ex.what());
    }
    try {
      validate_snapshot(s, ds.topology, ds.schema);
    } catch (const SchemaError& ex) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!ds.snapshots.empty() && !(s.window_start > ds.snapshots.back().window_start))
      throw SchemaError("line " + std::to_string(line_no) + ": window_start is not strictly increasing");
    ds.snapshots.push_back(std::move(s));
  }
  return ds;
}

Dataset load_dataset(const std::string& path, const LoadOptions& opts, std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open dataset: " + path);
  return load_dataset(in, opts, warnings);
}

Eigen::RowVectorXd flatten_features(const Snapshot& s) {
  const Index nx = s.node_features.size(), ne = s.edge_features.size(), nr = s.resource_features.size();
  Eigen::RowVectorXd v(nx + ne + nr);
  v.segment(0, nx) = Eigen::Map<const Eigen::RowVectorXd>(s.node_features.data(), nx);
  v.segment(nx, ne) = Eigen::Map<const Eigen::RowVectorXd>(s.edge_features.data(), ne);
  v.segment(nx + ne, nr) = Eigen::Map<const Eigen::RowVectorXd>(s.resource_features.data(), nr);
  return v;
}

}  // namespace usrf
