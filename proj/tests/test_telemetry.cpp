#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "usrf/error.hpp"
#include "usrf/telemetry.hpp"

using namespace usrf;

TEST_CASE("exposition parsing") {
  const std::string text =
      "# HELP istio_requests_total Total requests.\n"
      "# TYPE istio_requests_total counter\n"
      "\n"
      "istio_requests_total{source_workload=\"frontend\",destination_workload=\"cart\"} 42 1700000000\n"
      "container_memory_usage_bytes{workload=\"cart\"} 1.5e8 1700000005.5\n"
      "up 1\n";
  const ParseResult r = parse_exposition(text);
  REQUIRE(r.samples.size() == 3);
  CHECK(r.samples[0].name == "istio_requests_total");
  CHECK(r.samples[0].labels.at("destination_workload") == "cart");
  CHECK(r.samples[0].value == 42.0);
  CHECK(*r.samples[0].timestamp == 1700000000.0);
  CHECK(*r.samples[1].timestamp == 1700000005.5);
  CHECK(r.samples[1].value == 1.5e8);
  CHECK_FALSE(r.samples[2].timestamp.has_value());
}

TEST_CASE("malformed lines: strict throws with line number, lenient counts") {
  const std::string text = "a 1 0\nb{x=\"1\" 2 0\nc 3 0\n";
  try {
    parse_exposition(text);
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  const ParseResult r = parse_exposition(text, ParseOptions{false});
  CHECK(r.samples.size() == 2);
  CHECK(r.skipped == 1);
  CHECK(r.errors.size() == 1);
  CHECK_THROWS_AS(parse_exposition("x{a=\"1\"} notanumber\n"), ParseError);
}

TEST_CASE("label escapes round-trip") {
  MetricSample s;
  s.name = "m";
  s.labels = {{"k", "quote\" back\\slash\nnewline"}, {"e", ""}};
  s.value = 0.1;
  s.timestamp = 12.25;
  const ParseResult r = parse_exposition(format_sample(s) + "\n");
  REQUIRE(r.samples.size() == 1);
  CHECK(r.samples[0] == s);
}

TEST_CASE("counter to rate") {
  const std::vector<TimedValue> simple{{0, 100}, {30, 160}};
  CHECK(*counter_to_rate(simple, 0, 30) == doctest::Approx(2.0));
  const std::vector<TimedValue> reset{{0, 50}, {10, 80}, {20, 30}, {30, 60}};
  // 30 before the reset, 30 (post-reset value) at it, 30 after.
  CHECK(*counter_to_rate(reset, 0, 30) == doctest::Approx(90.0 / 30.0));
  const std::vector<TimedValue> single{{5, 1}};
  CHECK_FALSE(counter_to_rate(single, 0, 30).has_value());
  CHECK_FALSE(gauge_mean(single, 10, 40).has_value());
  CHECK(*gauge_mean(single, 0, 30) == 1.0);
}

TEST_CASE("counter rate is invariant to sampling refinement") {
  // Linear counter at 3.7/s sampled at several resolutions over [0, 30].
  for (int step : {30, 15, 10, 5, 1}) {
    std::vector<TimedValue> pts;
    for (int t = 0; t <= 30; t += step) pts.push_back({double(t), 1000.0 + 3.7 * t});
    CHECK(*counter_to_rate(pts, 0, 30) == doctest::Approx(3.7).epsilon(1e-12));
  }
}

TEST_CASE("sliding window counts") {
  const WindowSpec spec{30.0, 5.0};
  const auto w = sliding_windows(300.0, spec);
  REQUIRE(w.size() == 55);
  CHECK(w.back().start == 270.0);
  CHECK(w.back().end == 300.0);
  CHECK(window_count(30.0, spec) == 1);
  CHECK(window_count(29.0, spec) == 0);
  CHECK(window_count(0.0, spec) == 0);
  for (int d = 30; d < 1000; d += 13) CHECK(window_count(d, spec) == static_cast<std::size_t>((d - 30) / 5 + 1));
  CHECK_THROWS_AS((WindowSpec{0.0, 5.0}.validate()), InputError);
  CHECK_THROWS_AS((WindowSpec{30.0, 0.0}.validate()), InputError);
}

TEST_CASE("nearest-rank P95") {
  std::vector<double> v;
  for (int i = 100; i >= 1; --i) v.push_back(i);
  CHECK(*window_p95(v) == 95.0);
  CHECK(*window_p95(std::vector<double>{7.0}) == 7.0);
  CHECK_FALSE(window_p95(std::vector<double>{}).has_value());
  // 20 samples: rank ceil(19) = 19
  std::vector<double> twenty;
  for (int i = 1; i <= 20; ++i) twenty.push_back(i);
  CHECK(*window_p95(twenty) == 19.0);
  // 21 samples: rank ceil(19.95) = 20
  twenty.push_back(21);
  CHECK(*window_p95(twenty) == 20.0);
}

TEST_CASE("latency csv round trip and errors") {
  const std::vector<LatencyRecord> recs{{1.5, 0.125}, {2.0, 0.3}};
  std::stringstream ss;
  write_latency_csv(ss, recs);
  const auto back = read_latency_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].latency == 0.3);
  std::stringstream bad("timestamp,latency_seconds\n1,0.1\n2,-1\n");
  CHECK_THROWS_AS(read_latency_csv(bad), ParseError);
}

namespace {

// Two services a -> b, 5 s scrapes over [0, 60], exact counters.
std::vector<MetricSample> synthetic_samples(bool include_ab_traffic) {
  std::vector<MetricSample> out;
  auto push = [&](std::string name, std::map<std::string, std::string> labels, double v, double t) {
    out.push_back({std::move(name), std::move(labels), v, t});
  };
  for (int t = 0; t <= 60; t += 5) {
    for (const char* svc : {"a", "b"}) {
      const double k = svc[0] == 'a' ? 1.0 : 2.0;
      push("container_cpu_usage_seconds_total", {{"workload", svc}}, 0.1 * k * t, t);
      push("container_memory_usage_bytes", {{"workload", svc}}, 1e6 * k + t, t);
      push("container_spec_cpu_period", {{"workload", svc}}, 100000.0 * k, t);
      push("container_network_receive_bytes_total", {{"workload", svc}}, 10.0 * k * t, t);
      push("container_network_transmit_bytes_total", {{"workload", svc}}, 20.0 * k * t, t);
    }
    push("istio_requests_total", {{"source_workload", "unknown"}, {"destination_workload", "a"}}, 4.0 * t, t);
    push("istio_request_bytes_sum", {{"source_workload", "unknown"}, {"destination_workload", "a"}}, 400.0 * t, t);
    push("istio_response_bytes_sum", {{"source_workload", "unknown"}, {"destination_workload", "a"}}, 800.0 * t, t);
    if (include_ab_traffic) {
      push("istio_requests_total", {{"source_workload", "a"}, {"destination_workload", "b"}}, 2.0 * t, t);
      push("istio_request_bytes_sum", {{"source_workload", "a"}, {"destination_workload", "b"}}, 60.0 * t, t);
      push("istio_response_bytes_sum", {{"source_workload", "a"}, {"destination_workload", "b"}}, 90.0 * t, t);
    }
    push("go_goroutines", {}, 12, t);
  }
  return out;
}

}  // namespace

TEST_CASE("build_snapshots assembles features and labels") {
  const Topology topo({"a", "b"}, {{0, 1}});
  std::vector<LatencyRecord> lat;
  for (int i = 0; i < 600; ++i) lat.push_back({i * 0.1, 0.001 * (i % 100 + 1)});
  const IngestResult r = build_snapshots(synthetic_samples(true), lat, topo);
  CHECK(r.windows_total == 7);
  CHECK(r.ignored_samples == 13);
  REQUIRE(r.dataset.snapshots.size() == 7);
  const Snapshot& s = r.dataset.snapshots[2];
  CHECK(s.window_start == 10.0);
  CHECK(s.node_features(0, 0) == doctest::Approx(4.0));
  CHECK(s.node_features(1, 0) == doctest::Approx(2.0));
  CHECK(s.node_features(1, 2) == doctest::Approx(90.0));
  CHECK(s.edge_features(0, 1) == doctest::Approx(60.0));
  CHECK(s.resource_features(1, 0) == doctest::Approx(0.2));
  CHECK(s.resource_features(0, 1) == doctest::Approx(1e6 + 25.0));  // mean of 10..40
  CHECK(s.resource_features(1, 2) == doctest::Approx(200000.0));
  CHECK(s.resource_features(0, 4) == doctest::Approx(20.0));
  // Latencies completing in [10, 40): 300 records cycling 0.001..0.1.
  std::vector<double> oracle;
  for (const auto& l : lat)
    if (l.timestamp >= 10.0 && l.timestamp < 40.0) oracle.push_back(l.latency);
  std::sort(oracle.begin(), oracle.end());
  const std::size_t rank = (95 * oracle.size() + 99) / 100;
  CHECK(*s.label == oracle[rank - 1]);
}

TEST_CASE("edges without traffic get zero rows; windows without latency are dropped") {
  const Topology topo({"a", "b"}, {{0, 1}});
  std::vector<LatencyRecord> lat{{12.0, 0.05}};
  const IngestResult r = build_snapshots(synthetic_samples(false), lat, topo);
  CHECK(r.windows_total == 7);
  CHECK(r.dropped_no_latency == 4);
  REQUIRE(r.dataset.snapshots.size() == 3);
  CHECK(r.dataset.snapshots[0].edge_features.cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.dataset.snapshots[0].node_features(1, 0) == 0.0);
  CHECK(*r.dataset.snapshots[0].label == 0.05);
}

TEST_CASE("unknown services: strict rejects, lenient counts") {
  const Topology topo({"a"}, {});
  std::vector<LatencyRecord> lat{{1.0, 0.05}};
  auto samples = synthetic_samples(false);
  CHECK_THROWS_AS(build_snapshots(samples, lat, topo), SchemaError);
  IngestOptions opts;
  opts.strict = false;
  const IngestResult r = build_snapshots(samples, lat, topo, opts);
  CHECK(r.unknown_series_samples == 13 * 5);
  CHECK(r.dataset.snapshots.size() == 1);
}

TEST_CASE("a missing resource metric drops the window") {
  const Topology topo({"a", "b"}, {{0, 1}});
  auto samples = synthetic_samples(true);
  std::erase_if(samples, [](const MetricSample& s) {
    return s.name == "container_spec_cpu_period" && s.labels.at("workload") == "b" && *s.timestamp <= 30.0;
  });
  std::vector<LatencyRecord> lat;
  for (int i = 0; i < 60; ++i) lat.push_back({double(i), 0.01});
  const IngestResult r = build_snapshots(samples, lat, topo);
  CHECK(r.dropped_missing_metrics == 1);  // only [0, 30] has no period samples for b
  CHECK(r.dataset.snapshots.size() == 6);
}
