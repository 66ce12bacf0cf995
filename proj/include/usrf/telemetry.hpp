#pragma once

#include <algorithm>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "usrf/error.hpp"
#include "usrf/statgraph.hpp"

namespace usrf {

// Metric names understood by build_snapshots.
namespace metric {
inline constexpr std::string_view kCpuSeconds = "container_cpu_usage_seconds_total";
inline constexpr std::string_view kMemoryBytes = "container_memory_usage_bytes";
inline constexpr std::string_view kCpuPeriod = "container_spec_cpu_period";
inline constexpr std::string_view kNetReceiveBytes = "container_network_receive_bytes_total";
inline constexpr std::string_view kNetTransmitBytes = "container_network_transmit_bytes_total";
inline constexpr std::string_view kRequests = "istio_requests_total";
inline constexpr std::string_view kRequestBytes = "istio_request_bytes_sum";
inline constexpr std::string_view kResponseBytes = "istio_response_bytes_sum";

// Label carrying the service on resource metrics.
inline constexpr std::string_view kWorkloadLabel = "workload";
inline constexpr std::string_view kSourceLabel = "source_workload";
inline constexpr std::string_view kDestinationLabel = "destination_workload";
// source_workload value for traffic entering from outside the mesh.
inline constexpr std::string_view kExternalSource = "unknown";
}  // namespace metric

struct MetricSample {
  std::string name;
  std::map<std::string, std::string> labels;
  double value = 0.0;
  std::optional<double> timestamp;  // seconds

  bool operator==(const MetricSample&) const = default;
};

struct ParseOptions {
  bool strict = true;
};

struct ParseResult {
  std::vector<MetricSample> samples;
  std::size_t skipped = 0;           // malformed lines dropped in lenient mode
  std::vector<std::string> errors;   // one message per skipped line
};

/// Parses `name{label="v",...} value [timestamp]` lines. Blank and `#` lines
/// are skipped. Label values may contain \" \\ and \n escapes. Timestamps
/// are seconds. Strict mode throws ParseError at the first malformed line.
ParseResult parse_exposition(std::string_view text, const ParseOptions& opts = {});

std::string format_sample(const MetricSample& s);
void write_exposition(std::ostream& out, std::span<const MetricSample> samples);

struct TimedValue {
  double time = 0.0;
  double value = 0.0;
};

/// Rate of a cumulative counter over [start, end]: total increase of the
/// in-window samples divided by the window length. A drop between consecutive
/// samples is a reset and contributes the post-reset value. nullopt with
/// fewer than two in-window samples. `series` must be time-ordered.
std::optional<double> counter_to_rate(std::span<const TimedValue> series, double start, double end);

/// Mean of a gauge's in-window samples; nullopt when there are none.
std::optional<double> gauge_mean(std::span<const TimedValue> series, double start, double end);

struct WindowSpec {
  double length = 30.0;
  double stride = 5.0;
  void validate() const;
};

struct Window {
  double start = 0.0;
  double end = 0.0;
};

/// Windows [k·stride, k·stride + length] for k = 0, 1, ... while the end stays
/// within `duration`. Empty when duration < length.
std::vector<Window> sliding_windows(double duration, const WindowSpec& spec);
std::size_t window_count(double duration, const WindowSpec& spec);

/// Nearest-rank percentile: the ceil(num/den · n)-th order statistic. Exact
/// integer rank arithmetic; reorders `samples`.
template <typename Scalar>
Scalar nearest_rank(std::vector<Scalar>& samples, std::size_t num, std::size_t den) {
  if (samples.empty()) throw EmptyResultError("percentile of an empty sample");
  const std::size_t n = samples.size();
  std::size_t rank = (num * n + den - 1) / den;
  rank = std::clamp<std::size_t>(rank, 1, n);
  auto nth = samples.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(samples.begin(), nth, samples.end());
  return *nth;
}

/// Window P95 (nearest rank); nullopt for an empty window.
std::optional<double> window_p95(std::span<const double> latencies);

struct LatencyRecord {
  double timestamp = 0.0;  // completion time, seconds
  double latency = 0.0;    // seconds
};

// Sidecar CSV with header `timestamp,latency_seconds`.
void write_latency_csv(std::ostream& out, std::span<const LatencyRecord> records);
std::vector<LatencyRecord> read_latency_csv(std::istream& in);

struct IngestOptions {
  WindowSpec window;
  bool strict = true;
};

struct IngestResult {
  Dataset dataset;
  std::size_t windows_total = 0;
  std::size_t dropped_missing_metrics = 0;
  std::size_t dropped_no_latency = 0;
  std::size_t unknown_series_samples = 0;  // lenient mode only
  std::size_t ignored_samples = 0;         // metric names outside the schema
};

/// Aggregates raw samples into one snapshot per sliding window, windows
/// anchored at the earliest sample timestamp. Per window:
///   X[v] = rates of (requests, request bytes, response bytes) with destination v
///   E[e] = the same three rates for the (source, destination) series of e
///   R[v] = (cpu rate, mean memory bytes, mean cpu period, rx rate, tx rate)
///   y    = P95 of latencies completing in [start, end)
/// Traffic series absent from a window contribute zero; a service missing any
/// resource metric drops the window, as does a window without latencies.
IngestResult build_snapshots(std::span<const MetricSample> samples, std::span<const LatencyRecord> latencies,
                             const Topology& topology, const IngestOptions& opts = {});

}  // namespace usrf
