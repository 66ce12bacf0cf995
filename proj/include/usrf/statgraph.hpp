#pragma once

#include <array>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "usrf/tensor.hpp"

namespace usrf {

struct Edge {
  Index source = 0;
  Index destination = 0;
  bool operator==(const Edge&) const = default;
};

/// Static service dependency graph. Service position is part of the dataset
/// contract: position-dependent weights (spatial gating) are indexed by it.
class Topology {
 public:
  Topology() = default;
  /// Keeps the given order. Throws SchemaError on out-of-range indices,
  /// duplicate services or edges, and self-loops unless allowed.
  Topology(std::vector<std::string> services, std::vector<Edge> edges, bool allow_self_loops = false);

  /// Alphabetical service order, edges sorted by (source, destination).
  static Topology canonical(std::vector<std::string> services,
                            const std::vector<std::pair<std::string, std::string>>& edges,
                            bool allow_self_loops = false);

  const std::vector<std::string>& services() const { return services_; }
  const std::vector<Edge>& edges() const { return edges_; }
  Index num_services() const { return static_cast<Index>(services_.size()); }
  Index num_edges() const { return static_cast<Index>(edges_.size()); }
  bool allows_self_loops() const { return allow_self_loops_; }

  std::optional<Index> service_index(std::string_view name) const;
  std::optional<Index> edge_index(Index source, Index destination) const;
  std::vector<Index> in_degree() const;

  bool operator==(const Topology& other) const {
    return services_ == other.services_ && edges_ == other.edges_;
  }

 private:
  std::vector<std::string> services_;
  std::vector<Edge> edges_;
  bool allow_self_loops_ = false;
};

nlohmann::json topology_to_json(const Topology& topo);
Topology topology_from_json(const nlohmann::json& j);
Topology load_topology(const std::string& path);
void save_topology(const std::string& path, const Topology& topo);

/// Feature widths: node traffic, edge traffic, per-service resources.
struct FeatureSchema {
  Index node_dim = 3;
  Index edge_dim = 3;
  Index resource_dim = 5;
  bool operator==(const FeatureSchema&) const = default;
};

/// One observation window.
struct Snapshot {
  double window_start = 0.0;  // seconds since epoch
  Matrix node_features;       // |V| x d_n
  Matrix edge_features;       // |E| x d_e
  Matrix resource_features;   // |V| x d_r
  std::optional<double> label;  // window P95 latency, seconds

  bool operator==(const Snapshot&) const = default;
};

struct Dataset {
  Topology topology;
  FeatureSchema schema;
  std::vector<Snapshot> snapshots;

  /// Throws SchemaError on shape mismatches, non-finite or negative features,
  /// non-positive labels, or timestamps that are not strictly increasing.
  void validate() const;
};

void validate_snapshot(const Snapshot& s, const Topology& topo, const FeatureSchema& schema);

struct SplitFractions {
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;
};

struct DatasetSplit {
  std::span<const Snapshot> train;
  std::span<const Snapshot> val;
  std::span<const Snapshot> test;
};

/// Contiguous time-ordered partition; train/val sizes are floor(f * T) and the
/// remainder goes to test. Requires T >= 10.
DatasetSplit chronological_split(const Dataset& ds, const SplitFractions& f = {});
std::array<std::size_t, 3> split_sizes(std::size_t total, const SplitFractions& f = {});

/// Per-column z-score statistics for each feature block.
struct NormStats {
  Eigen::RowVectorXd node_mean, node_std;
  Eigen::RowVectorXd edge_mean, edge_std;
  Eigen::RowVectorXd resource_mean, resource_std;

  bool operator==(const NormStats&) const = default;
};

inline constexpr double kStdFloor = 1e-8;

/// Statistics pooled over all rows of all snapshots in the training split,
/// population std floored at kStdFloor. Labels are left untouched.
NormStats fit_normalizer(std::span<const Snapshot> train);
Snapshot apply_normalizer(const Snapshot& s, const NormStats& stats);
std::vector<Snapshot> apply_normalizer(std::span<const Snapshot> snaps, const NormStats& stats);

nlohmann::json norm_stats_to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

// Dataset file: a JSON header line followed by one JSON line per snapshot.
//   {"format":"usrfnet-dataset","version":1,"services":[...],"edges":[[src,dst],...],
//    "schema":{"d_n":3,"d_e":3,"d_r":5}}
//   {"window_start":t,"X":[[...]],"E":[[...]],"R":[[...]],"y":p95}
// "y" is omitted for unlabeled snapshots. Unknown keys and snapshot lines that
// are not JSON objects are errors in strict mode; otherwise they produce a
// warning (the malformed line is skipped).

inline constexpr int kDatasetVersion = 1;

struct LoadOptions {
  bool strict = true;
};

void save_dataset(std::ostream& out, const Dataset& ds);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(std::istream& in, const LoadOptions& opts = {}, std::vector<std::string>* warnings = nullptr);
Dataset load_dataset(const std::string& path, const LoadOptions& opts = {},
                     std::vector<std::string>* warnings = nullptr);

/// Flattened X ‖ E ‖ R (row-major), length |V|·d_n + |E|·d_e + |V|·d_r.
Eigen::RowVectorXd flatten_features(const Snapshot& s);

}  // namespace usrf
