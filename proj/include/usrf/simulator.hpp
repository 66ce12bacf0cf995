#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usrf/rng.hpp"
#include "usrf/statgraph.hpp"
#include "usrf/telemetry.hpp"

namespace usrf {

/// Per-service capacity and cost model. Each pod is one FIFO server with
/// exponential service times of rate `service_rate * speed`.
struct ServiceProfile {
  int pods = 1;
  double service_rate = 100.0;      // requests/s per pod
  double cpu_per_second = 1.0;      // cpu-seconds consumed per second of service
  double request_bytes = 800.0;     // payload received per call
  double response_bytes = 3000.0;   // payload returned per call
  double memory_base = 64e6;        // bytes
  double memory_per_inflight = 2e6; // bytes per queued or running request
};

/// One API call: the entry service handles the request, then `calls` run in
/// order; each call (caller, callee) makes the request visit the callee.
struct RequestType {
  std::string name;
  Index entry = 0;
  std::vector<Edge> calls;
  double weight = 1.0;
};

/// Change of pods and/or speed of one service at a point in time.
struct CapacityEvent {
  double time = 0.0;
  Index service = 0;
  std::optional<int> pods;
  std::optional<double> speed;
};

struct ClusterSpec {
  Topology topology;
  std::vector<ServiceProfile> services;  // topology order
  std::vector<RequestType> requests;
  std::vector<CapacityEvent> capacity_events;
  double noise_sigma = 0.01;       // relative observation noise on resource metrics
  std::size_t queue_cap = 2000;    // queue length flagged as saturation
  double scrape_interval = 5.0;

  /// Weights positive and summing to one; every call edge exists; pods >= 1.
  void validate() const;
};

enum class SegmentKind { Ramp, Spike, Plateau };

/// ramp: linear start->end; spike: linear start->end at the midpoint and back
/// to start; plateau: constant start (end must equal start or be omitted).
struct Segment {
  SegmentKind kind = SegmentKind::Plateau;
  double duration = 0.0;
  double start_rate = 0.0;
  double end_rate = 0.0;
};

struct IntensityProfile {
  std::vector<Segment> segments;

  void validate() const;
  double total_duration() const;
  /// Request rate at time t; zero beyond the last segment.
  double rate_at(double t) const;
};

struct Arrival {
  double time = 0.0;
  Index request_type = 0;
};

/// Nonhomogeneous Poisson arrivals by thinning, per segment, with request
/// types drawn from `weights`.
std::vector<Arrival> sample_workload(const IntensityProfile& profile, std::span<const double> weights, Rng& rng);

struct SimOptions {
  bool record_traversals = false;
};

struct Traversal {
  double time = 0.0;
  Index edge = 0;
};

/// Telemetry emitted at every scrape: one value per series per scrape.
struct TelemetryLog {
  struct Series {
    std::string name;
    std::map<std::string, std::string> labels;
  };
  std::vector<Series> series;
  std::vector<double> times;
  std::vector<std::vector<double>> values;  // [scrape][series]

  std::vector<MetricSample> samples() const;
  void write_exposition(std::ostream& out) const;
};

struct SimResult {
  std::vector<LatencyRecord> latencies;  // in completion order
  TelemetryLog telemetry;
  std::vector<double> saturated_intervals;  // start times of flagged scrape intervals
  std::vector<Traversal> traversals;        // only with record_traversals
  std::size_t arrivals = 0;
  std::size_t completed = 0;
  double duration = 0.0;
};

/// Event-driven run over [0, duration]. Scrapes at every multiple of the
/// scrape interval up to `duration`, after all events at that instant.
SimResult run_simulation(const ClusterSpec& spec, std::span<const Arrival> workload, double duration,
                         std::uint64_t seed, const SimOptions& opts = {});

/// Window P95 straight from request records by full sort; windows anchored at 0.
std::vector<std::optional<double>> simulated_window_p95(std::span<const LatencyRecord> latencies, double duration,
                                                        const WindowSpec& spec);

// Presets. Edge sets approximate the public reference deployments; request
// mix defaults to browse 0.60, view-cart 0.25, checkout 0.15.
ClusterSpec online_boutique_like();
ClusterSpec sockshop_like();
/// One service, no edges, one request type; for queueing checks.
ClusterSpec single_service(double service_rate, int pods = 1);

/// Piecewise profile of ramps, spikes and plateaus between `base` and `peak`.
IntensityProfile ramps_and_spikes(double duration, double base, double peak, Rng& rng);
/// Random pod/speed changes every `interval` seconds on randomly chosen services.
std::vector<CapacityEvent> random_capacity_schedule(const ClusterSpec& spec, double duration, double interval,
                                                    int min_pods, int max_pods, double min_speed, Rng& rng);

/// Everything a simulate run needs, as read from a scenario file.
struct Scenario {
  ClusterSpec cluster;
  IntensityProfile profile;
  std::uint64_t seed = 1;
  double duration = 0.0;
};

// Scenario file (JSON). Either "preset": "online_boutique_like" | "sockshop_like",
// or explicit "topology", "services", "requests". Then "profile" (list of
// {"kind","duration","start_rate","end_rate"}), "seed", "duration", and the
// optional "capacity_events", "random_capacity", "noise_sigma", "queue_cap".
// "random_profile": {"base","peak"} draws a ramps_and_spikes profile from the
// seed instead of listing segments. Random parts are expanded at load time.
Scenario scenario_from_json(const nlohmann::json& j);
Scenario load_scenario(const std::string& path);
nlohmann::json scenario_to_json(const Scenario& s);

}  // namespace usrf
