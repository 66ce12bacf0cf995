#include "usrf/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <ostream>
#include <queue>

#include "usrf/checkpoint.hpp"
#include "usrf/error.hpp"

namespace usrf {

using nlohmann::json;

void ClusterSpec::validate() const {
  const Index nv = topology.num_services();
  if (nv == 0) throw InputError("cluster has no services");
  if (static_cast<Index>(services.size()) != nv)
    throw InputError("cluster lists " + std::to_string(services.size()) + " service profiles for " +
                     std::to_string(nv) + " services");
  for (std::size_t i = 0; i < services.size(); ++i) {
    const auto& s = services[i];
    if (s.pods < 1) throw InputError("service " + topology.services()[i] + " needs at least one pod");
    if (!(s.service_rate > 0.0)) throw InputError("service_rate must be > 0 for " + topology.services()[i]);
    if (s.cpu_per_second < 0 || s.request_bytes < 0 || s.response_bytes < 0 || s.memory_base < 0 ||
        s.memory_per_inflight < 0)
      throw InputError("negative cost parameter for " + topology.services()[i]);
  }
  if (requests.empty()) throw InputError("cluster has no request types");
  double total = 0.0;
  for (const auto& r : requests) {
    if (!(r.weight > 0.0)) throw InputError("request weight must be > 0: " + r.name);
    total += r.weight;
    if (r.entry < 0 || r.entry >= nv) throw InputError("request entry out of range: " + r.name);
    for (const Edge& c : r.calls)
      if (!topology.edge_index(c.source, c.destination))
        throw InputError("request " + r.name + " uses a call that is not a topology edge");
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("request weights must sum to 1");
  for (const auto& ev : capacity_events) {
    if (ev.service < 0 || ev.service >= nv) throw InputError("capacity event service out of range");
    if (ev.pods && *ev.pods < 1) throw InputError("capacity event pods must be >= 1");
    if (ev.speed && !(*ev.speed > 0.0)) throw InputError("capacity event speed must be > 0");
  }
  if (!(scrape_interval > 0.0)) throw InputError("scrape_interval must be > 0");
  if (noise_sigma < 0.0) throw InputError("noise_sigma must be >= 0");
}

void IntensityProfile::validate() const {
  for (const auto& s : segments) {
    if (!(s.duration > 0.0)) throw InputError("profile segment duration must be > 0");
    if (s.start_rate < 0.0 || s.end_rate < 0.0) throw InputError("profile rates must be >= 0");
    if (s.kind == SegmentKind::Plateau && s.end_rate != s.start_rate)
      throw InputError("plateau segments have a single rate");
  }
}

double IntensityProfile::total_duration() const {
  double d = 0.0;
  for (const auto& s : segments) d += s.duration;
  return d;
}

namespace {

double segment_rate(const Segment& s, double local) {
  const double u = std::clamp(local / s.duration, 0.0, 1.0);
  switch (s.kind) {
    case SegmentKind::Plateau: return s.start_rate;
    case SegmentKind::Ramp: return s.start_rate + (s.end_rate - s.start_rate) * u;
    case SegmentKind::Spike: {
      const double tri = u < 0.5 ? 2.0 * u : 2.0 * (1.0 - u);
      return s.start_rate + (s.end_rate - s.start_rate) * tri;
    }
  }
  return 0.0;
}

Index draw_type(std::span<const double> cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  if (it == cumulative.end()) --it;
  return static_cast<Index>(it - cumulative.begin());
}

}  // namespace

double IntensityProfile::rate_at(double t) const {
  double offset = 0.0;
  for (const auto& s : segments) {
    if (t < offset + s.duration) return segment_rate(s, t - offset);
    offset += s.duration;
  }
  return 0.0;
}

std::vector<Arrival> sample_workload(const IntensityProfile& profile, std::span<const double> weights, Rng& rng) {
  profile.validate();
  if (weights.empty()) throw InputError("sample_workload: no request weights");
  std::vector<double> cumulative;
  double acc = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw InputError("sample_workload: weights must be > 0");
    acc += w;
    cumulative.push_back(acc);
  }
  std::vector<Arrival> out;
  double offset = 0.0;
  for (const auto& seg : profile.segments) {
    const double peak = std::max(seg.start_rate, seg.end_rate);
    if (peak > 0.0) {
      double local = 0.0;
      while (true) {
        local += rng.exponential(peak);
        if (local >= seg.duration) break;
        if (rng.uniform() * peak < segment_rate(seg, local)) out.push_back({offset + local, draw_type(cumulative, rng)});
      }
    }
    offset += seg.duration;
  }
  return out;
}

std::vector<MetricSample> TelemetryLog::samples() const {
  std::vector<MetricSample> out;
  out.reserve(times.size() * series.size());
  for (std::size_t k = 0; k < times.size(); ++k)
    for (std::size_t s = 0; s < series.size(); ++s)
      out.push_back({series[s].name, series[s].labels, values[k][s], times[k]});
  return out;
}

void TelemetryLog::write_exposition(std::ostream& out) const {
  MetricSample tmp;
  for (std::size_t k = 0; k < times.size(); ++k) {
    out << "# scrape " << format_double(times[k]) << '\n';
    for (std::size_t s = 0; s < series.size(); ++s) {
      tmp.name = series[s].name;
      tmp.labels = series[s].labels;
      tmp.value = values[k][s];
      tmp.timestamp = times[k];
      out << format_sample(tmp) << '\n';
    }
  }
}

namespace {

enum EventKind : int { kCapacity = 0, kArrival = 1, kServiceEnd = 2, kScrape = 3 };

struct Event {
  double time;
  int kind;
  std::uint64_t seq;
  Index a;        // request id or capacity-event index
  Index service;
  double service_time;
};

struct EventLater {
  bool operator()(const Event& x, const Event& y) const {
    if (x.time != y.time) return x.time > y.time;
    if (x.kind != y.kind) return x.kind > y.kind;
    return x.seq > y.seq;
  }
};

struct ServiceState {
  int pods = 1;
  int busy = 0;
  double speed = 1.0;
  std::deque<Index> queue;
};

struct RequestState {
  Index type = 0;
  double start = 0.0;
  std::size_t hop = 0;  // 0 = entry, i = callee of calls[i-1]
};

// Resource counters carry multiplicative observation noise on each increment
// so the emitted series stays monotone.
struct NoisyCounter {
  double truth = 0.0;
  double emitted_truth = 0.0;
  double emitted = 0.0;

  double emit(double sigma, Rng& rng) {
    const double delta = truth - emitted_truth;
    emitted_truth = truth;
    if (delta > 0.0) emitted += std::max(0.0, delta * (1.0 + sigma * rng.normal()));
    return emitted;
  }
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

SimResult run_simulation(const ClusterSpec& spec, std::span<const Arrival> workload, double duration,
                         std::uint64_t seed, const SimOptions& opts) {
  spec.validate();
  if (!(duration > 0.0)) throw InputError("simulation duration must be > 0");
  for (std::size_t i = 0; i < workload.size(); ++i) {
    if (workload[i].request_type < 0 || workload[i].request_type >= static_cast<Index>(spec.requests.size()))
      throw InputError("arrival references an unknown request type");
    if (i > 0 && workload[i].time < workload[i - 1].time) throw InputError("arrivals must be time-ordered");
  }

  const auto& topo = spec.topology;
  const Index nv = topo.num_services();
  const Index ne = topo.num_edges();
  Rng service_rng(mix_seed(seed, 1));
  Rng noise_rng(mix_seed(seed, 2));

  std::vector<ServiceState> svc(nv);
  for (Index v = 0; v < nv; ++v) svc[v].pods = spec.services[v].pods;

  std::vector<NoisyCounter> cpu(nv), rx(nv), tx(nv);
  std::vector<double> edge_req(ne, 0.0), edge_req_bytes(ne, 0.0), edge_resp_bytes(ne, 0.0);
  std::vector<Index> entries;
  for (const auto& r : spec.requests)
    if (std::find(entries.begin(), entries.end(), r.entry) == entries.end()) entries.push_back(r.entry);
  std::sort(entries.begin(), entries.end());
  std::vector<double> in_req(nv, 0.0), in_req_bytes(nv, 0.0), in_resp_bytes(nv, 0.0);

  std::vector<std::vector<Index>> call_edges(spec.requests.size());
  for (std::size_t r = 0; r < spec.requests.size(); ++r)
    for (const Edge& c : spec.requests[r].calls) call_edges[r].push_back(*topo.edge_index(c.source, c.destination));

  SimResult result;
  result.duration = duration;
  auto& log = result.telemetry;
  for (Index v = 0; v < nv; ++v) {
    const std::map<std::string, std::string> labels{{std::string(metric::kWorkloadLabel), topo.services()[v]}};
    for (auto name : {metric::kCpuSeconds, metric::kMemoryBytes, metric::kCpuPeriod, metric::kNetReceiveBytes,
                      metric::kNetTransmitBytes})
      log.series.push_back({std::string(name), labels});
  }
  auto traffic_labels = [&](const std::string& src, const std::string& dst) {
    return std::map<std::string, std::string>{{std::string(metric::kSourceLabel), src},
                                              {std::string(metric::kDestinationLabel), dst}};
  };
  for (const Edge& e : topo.edges()) {
    const auto labels = traffic_labels(topo.services()[e.source], topo.services()[e.destination]);
    for (auto name : {metric::kRequests, metric::kRequestBytes, metric::kResponseBytes})
      log.series.push_back({std::string(name), labels});
  }
  for (Index v : entries) {
    const auto labels = traffic_labels(std::string(metric::kExternalSource), topo.services()[v]);
    for (auto name : {metric::kRequests, metric::kRequestBytes, metric::kResponseBytes})
      log.series.push_back({std::string(name), labels});
  }

  std::priority_queue<Event, std::vector<Event>, EventLater> heap;
  std::uint64_t seq = 0;
  for (std::size_t i = 0; i < spec.capacity_events.size(); ++i)
    heap.push({spec.capacity_events[i].time, kCapacity, seq++, static_cast<Index>(i), 0, 0.0});

  std::vector<RequestState> reqs(workload.size());
  std::vector<char> saturated;
  const double interval = spec.scrape_interval;

  auto flag_saturation = [&](double now) {
    const auto k = static_cast<std::size_t>(std::floor(now / interval));
    if (saturated.size() <= k) saturated.resize(k + 1, 0);
    saturated[k] = 1;
  };

  auto start_service = [&](Index v, Index req, double now) {
    ++svc[v].busy;
    const double st = service_rng.exponential(spec.services[v].service_rate * svc[v].speed);
    heap.push({now + st, kServiceEnd, seq++, req, v, st});
  };

  auto arrive = [&](Index v, Index req, double now) {
    if (svc[v].busy < svc[v].pods) {
      start_service(v, req, now);
    } else {
      svc[v].queue.push_back(req);
      if (svc[v].queue.size() > spec.queue_cap) flag_saturation(now);
    }
  };

  auto drain = [&](Index v, double now) {
    while (svc[v].busy < svc[v].pods && !svc[v].queue.empty()) {
      const Index next = svc[v].queue.front();
      svc[v].queue.pop_front();
      start_service(v, next, now);
    }
  };

  auto handle_arrival = [&](Index req, double now) {
    const auto& rt = spec.requests[reqs[req].type];
    const Index v = rt.entry;
    in_req[v] += 1.0;
    in_req_bytes[v] += spec.services[v].request_bytes;
    rx[v].truth += spec.services[v].request_bytes;
    arrive(v, req, now);
  };

  auto handle_service_end = [&](const Event& ev) {
    const double now = ev.time;
    const Index v = ev.service;
    const Index req = ev.a;
    --svc[v].busy;
    cpu[v].truth += ev.service_time * spec.services[v].cpu_per_second;
    const double resp = spec.services[v].response_bytes;
    tx[v].truth += resp;
    RequestState& rs = reqs[req];
    const auto& rt = spec.requests[rs.type];
    if (rs.hop == 0) {
      in_resp_bytes[v] += resp;
    } else {
      const Index e = call_edges[rs.type][rs.hop - 1];
      edge_resp_bytes[e] += resp;
      rx[rt.calls[rs.hop - 1].source].truth += resp;
    }
    drain(v, now);

    if (rs.hop < rt.calls.size()) {
      const Edge& call = rt.calls[rs.hop];
      const Index e = call_edges[rs.type][rs.hop];
      ++rs.hop;
      const double bytes = spec.services[call.destination].request_bytes;
      edge_req[e] += 1.0;
      edge_req_bytes[e] += bytes;
      tx[call.source].truth += bytes;
      rx[call.destination].truth += bytes;
      if (opts.record_traversals) result.traversals.push_back({now, e});
      arrive(call.destination, req, now);
    } else {
      result.latencies.push_back({now, now - rs.start});
      ++result.completed;
    }
  };

  auto handle_capacity = [&](const CapacityEvent& ce, double now) {
    auto& s = svc[ce.service];
    if (ce.pods) s.pods = *ce.pods;
    if (ce.speed) s.speed = *ce.speed;
    drain(ce.service, now);
  };

  auto scrape = [&](double now) {
    std::vector<double> row;
    row.reserve(log.series.size());
    const double sigma = spec.noise_sigma;
    for (Index v = 0; v < nv; ++v) {
      const auto& p = spec.services[v];
      const double inflight = static_cast<double>(svc[v].busy) + static_cast<double>(svc[v].queue.size());
      row.push_back(cpu[v].emit(sigma, noise_rng));
      const double mem = (p.memory_base + p.memory_per_inflight * inflight) * (1.0 + sigma * noise_rng.normal());
      row.push_back(std::max(0.0, mem));
      row.push_back(100000.0 * svc[v].pods);
      row.push_back(rx[v].emit(sigma, noise_rng));
      row.push_back(tx[v].emit(sigma, noise_rng));
    }
    for (Index e = 0; e < ne; ++e) {
      row.push_back(edge_req[e]);
      row.push_back(edge_req_bytes[e]);
      row.push_back(edge_resp_bytes[e]);
    }
    for (Index v : entries) {
      row.push_back(in_req[v]);
      row.push_back(in_req_bytes[v]);
      row.push_back(in_resp_bytes[v]);
    }
    log.times.push_back(now);
    log.values.push_back(std::move(row));
  };

  std::size_t next_arrival = 0;
  std::size_t scrape_k = 0;
  while (true) {
    const double scrape_time = static_cast<double>(scrape_k) * interval;
    const bool scrape_pending = scrape_time <= duration + 1e-9;
    Event next{std::numeric_limits<double>::infinity(), kScrape + 1, 0, 0, 0, 0.0};
    if (!heap.empty()) next = heap.top();
    bool take_arrival = false;
    if (next_arrival < workload.size()) {
      const double at = workload[next_arrival].time;
      if (at < next.time || (at == next.time && kArrival < next.kind)) {
        take_arrival = true;
        next = {at, kArrival, 0, static_cast<Index>(next_arrival), 0, 0.0};
      }
    }
    if (scrape_pending && (scrape_time < next.time || (scrape_time == next.time && kScrape < next.kind))) {
      scrape(scrape_time);
      ++scrape_k;
      continue;
    }
    if (next.time > duration || !std::isfinite(next.time)) {
      if (!scrape_pending) break;
      scrape(scrape_time);
      ++scrape_k;
      continue;
    }
    if (take_arrival) {
      const Index id = static_cast<Index>(next_arrival++);
      reqs[id] = {workload[id].request_type, workload[id].time, 0};
      ++result.arrivals;
      handle_arrival(id, next.time);
    } else {
      heap.pop();
      if (next.kind == kCapacity)
        handle_capacity(spec.capacity_events[next.a], next.time);
      else
        handle_service_end(next);
    }
  }

  for (std::size_t k = 0; k < saturated.size(); ++k)
    if (saturated[k]) result.saturated_intervals.push_back(static_cast<double>(k) * interval);
  return result;
}

std::vector<std::optional<double>> simulated_window_p95(std::span<const LatencyRecord> latencies, double duration,
                                                        const WindowSpec& spec) {
  std::vector<std::optional<double>> out;
  for (const Window& w : sliding_windows(duration, spec)) {
    std::vector<double> in;
    for (const auto& r : latencies)
      if (r.timestamp >= w.start && r.timestamp < w.end) in.push_back(r.latency);
    if (in.empty()) {
      out.push_back(std::nullopt);
      continue;
    }
    std::sort(in.begin(), in.end());
    const std::size_t n = in.size();
    std::size_t rank = n * 95 / 100;
    if ((n * 95) % 100 != 0) ++rank;
    out.push_back(in[std::max<std::size_t>(rank, 1) - 1]);
  }
  return out;
}

namespace {

struct PresetService {
  const char* name;
  ServiceProfile profile;
};

struct PresetRequest {
  const char* name;
  const char* entry;
  std::vector<std::pair<const char*, const char*>> calls;
  double weight;
};

ClusterSpec build_preset(const std::vector<PresetService>& services,
                         const std::vector<std::pair<std::string, std::string>>& edges,
                         const std::vector<PresetRequest>& requests) {
  std::vector<std::string> names;
  for (const auto& s : services) names.emplace_back(s.name);
  ClusterSpec spec;
  spec.topology = Topology::canonical(names, edges);
  spec.services.resize(names.size());
  for (const auto& s : services) spec.services[*spec.topology.service_index(s.name)] = s.profile;
  for (const auto& r : requests) {
    RequestType rt;
    rt.name = r.name;
    rt.entry = *spec.topology.service_index(r.entry);
    rt.weight = r.weight;
    for (const auto& [a, b] : r.calls) rt.calls.push_back({*spec.topology.service_index(a), *spec.topology.service_index(b)});
    spec.requests.push_back(std::move(rt));
  }
  spec.validate();
  return spec;
}

ServiceProfile svc(int pods, double rate, double req_bytes, double resp_bytes, double mem_base_mb) {
  ServiceProfile p;
  p.pods = pods;
  p.service_rate = rate;
  p.request_bytes = req_bytes;
  p.response_bytes = resp_bytes;
  p.memory_base = mem_base_mb * 1e6;
  return p;
}

}  // namespace

ClusterSpec online_boutique_like() {
  const std::vector<PresetService> services = {
      {"frontend", svc(2, 80, 600, 18000, 90)},
      {"productcatalogservice", svc(2, 120, 300, 6000, 40)},
      {"currencyservice", svc(1, 200, 200, 400, 60)},
      {"recommendationservice", svc(1, 120, 400, 1500, 110)},
      {"adservice", svc(1, 150, 300, 900, 180)},
      {"cartservice", svc(1, 100, 350, 1200, 70)},
      {"redis-cart", svc(1, 400, 200, 800, 30)},
      {"shippingservice", svc(1, 150, 500, 300, 25)},
      {"checkoutservice", svc(1, 60, 900, 700, 35)},
      {"paymentservice", svc(1, 100, 400, 200, 45)},
      {"emailservice", svc(1, 80, 1200, 150, 75)},
  };
  const std::vector<std::pair<std::string, std::string>> edges = {
      {"frontend", "adservice"},
      {"frontend", "cartservice"},
      {"frontend", "checkoutservice"},
      {"frontend", "currencyservice"},
      {"frontend", "productcatalogservice"},
      {"frontend", "recommendationservice"},
      {"frontend", "shippingservice"},
      {"cartservice", "redis-cart"},
      {"checkoutservice", "cartservice"},
      {"checkoutservice", "currencyservice"},
      {"checkoutservice", "emailservice"},
      {"checkoutservice", "paymentservice"},
      {"checkoutservice", "productcatalogservice"},
      {"checkoutservice", "shippingservice"},
      {"recommendationservice", "productcatalogservice"},
  };
  const std::vector<PresetRequest> requests = {
      {"browse",
       "frontend",
       {{"frontend", "productcatalogservice"},
        {"frontend", "currencyservice"},
        {"frontend", "recommendationservice"},
        {"recommendationservice", "productcatalogservice"},
        {"frontend", "adservice"}},
       0.60},
      {"view-cart",
       "frontend",
       {{"frontend", "cartservice"},
        {"cartservice", "redis-cart"},
        {"frontend", "productcatalogservice"},
        {"frontend", "currencyservice"},
        {"frontend", "shippingservice"}},
       0.25},
      {"checkout",
       "frontend",
       {{"frontend", "checkoutservice"},
        {"checkoutservice", "cartservice"},
        {"cartservice", "redis-cart"},
        {"checkoutservice", "productcatalogservice"},
        {"checkoutservice", "currencyservice"},
        {"checkoutservice", "shippingservice"},
        {"checkoutservice", "paymentservice"},
        {"checkoutservice", "emailservice"}},
       0.15},
  };
  return build_preset(services, edges, requests);
}

ClusterSpec sockshop_like() {
  const std::vector<PresetService> services = {
      {"front-end", svc(2, 90, 700, 15000, 120)},
      {"catalogue", svc(1, 160, 300, 5000, 30)},
      {"catalogue-db", svc(1, 250, 200, 4000, 200)},
      {"carts", svc(1, 110, 400, 1500, 300)},
      {"carts-db", svc(1, 250, 300, 1200, 150)},
      {"orders", svc(1, 70, 1200, 900, 320)},
      {"orders-db", svc(1, 200, 900, 300, 150)},
      {"payment", svc(1, 150, 300, 150, 15)},
      {"shipping", svc(1, 120, 500, 200, 280)},
      {"rabbitmq", svc(1, 300, 500, 100, 110)},
      {"queue-master", svc(1, 200, 500, 100, 260)},
      {"user", svc(1, 140, 300, 600, 25)},
      {"user-db", svc(1, 250, 200, 500, 140)},
  };
  const std::vector<std::pair<std::string, std::string>> edges = {
      {"front-end", "catalogue"}, {"front-end", "carts"},     {"front-end", "orders"}, {"front-end", "user"},
      {"catalogue", "catalogue-db"}, {"carts", "carts-db"}, {"orders", "carts"},     {"orders", "orders-db"},
      {"orders", "payment"},      {"orders", "shipping"},    {"orders", "user"},      {"shipping", "rabbitmq"},
      {"rabbitmq", "queue-master"}, {"user", "user-db"},
  };
  const std::vector<PresetRequest> requests = {
      {"browse", "front-end", {{"front-end", "catalogue"}, {"catalogue", "catalogue-db"}}, 0.60},
      {"view-cart",
       "front-end",
       {{"front-end", "carts"}, {"carts", "carts-db"}, {"front-end", "catalogue"}, {"catalogue", "catalogue-db"}},
       0.25},
      {"checkout",
       "front-end",
       {{"front-end", "user"},
        {"user", "user-db"},
        {"front-end", "orders"},
        {"orders", "user"},
        {"user", "user-db"},
        {"orders", "carts"},
        {"carts", "carts-db"},
        {"orders", "payment"},
        {"orders", "shipping"},
        {"shipping", "rabbitmq"},
        {"rabbitmq", "queue-master"},
        {"orders", "orders-db"}},
       0.15},
  };
  return build_preset(services, edges, requests);
}

ClusterSpec single_service(double service_rate, int pods) {
  ClusterSpec spec;
  spec.topology = Topology({"service"}, {});
  ServiceProfile p;
  p.pods = pods;
  p.service_rate = service_rate;
  spec.services = {p};
  spec.requests = {RequestType{"call", 0, {}, 1.0}};
  spec.queue_cap = 1u << 30;
  spec.validate();
  return spec;
}

IntensityProfile ramps_and_spikes(double duration, double base, double peak, Rng& rng) {
  if (!(duration > 0.0) || base < 0.0 || peak < base) throw InputError("ramps_and_spikes: bad arguments");
  IntensityProfile p;
  double t = 0.0;
  double level = base;
  while (t < duration) {
    Segment s;
    const double choice = rng.uniform();
    if (choice < 0.45) {
      s.kind = SegmentKind::Ramp;
      s.duration = rng.uniform(120.0, 600.0);
      s.start_rate = level;
      s.end_rate = rng.uniform(base, peak);
    } else if (choice < 0.75) {
      s.kind = SegmentKind::Plateau;
      s.duration = rng.uniform(60.0, 300.0);
      s.start_rate = s.end_rate = level;
    } else {
      s.kind = SegmentKind::Spike;
      s.duration = rng.uniform(20.0, 90.0);
      s.start_rate = level;
      s.end_rate = level + (peak - level) * rng.uniform(0.5, 1.0);
    }
    if (t + s.duration > duration) {
      const double keep = duration - t;
      if (s.kind == SegmentKind::Ramp) s.end_rate = s.start_rate + (s.end_rate - s.start_rate) * keep / s.duration;
      if (s.kind == SegmentKind::Spike) s.kind = SegmentKind::Plateau, s.end_rate = s.start_rate;
      s.duration = keep;
    }
    if (s.kind == SegmentKind::Ramp) level = s.end_rate;
    t += s.duration;
    if (s.duration > 0.0) p.segments.push_back(s);
  }
  return p;
}

std::vector<CapacityEvent> random_capacity_schedule(const ClusterSpec& spec, double duration, double interval,
                                                    int min_pods, int max_pods, double min_speed, Rng& rng) {
  if (!(interval > 0.0) || min_pods < 1 || max_pods < min_pods || !(min_speed > 0.0 && min_speed <= 1.0))
    throw InputError("random_capacity_schedule: bad arguments");
  std::vector<CapacityEvent> out;
  const auto nv = static_cast<std::uint64_t>(spec.topology.num_services());
  for (double t = interval; t < duration; t += interval) {
    CapacityEvent ev;
    ev.time = t;
    ev.service = static_cast<Index>(rng.below(nv));
    ev.pods = min_pods + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_pods - min_pods + 1)));
    ev.speed = rng.uniform(min_speed, 1.0);
    out.push_back(ev);
  }
  return out;
}

namespace {

SegmentKind kind_from_string(const std::string& s) {
  if (s == "ramp") return SegmentKind::Ramp;
  if (s == "spike") return SegmentKind::Spike;
  if (s == "plateau") return SegmentKind::Plateau;
  throw InputError("unknown profile segment kind: " + s);
}

const char* kind_to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::Ramp: return "ramp";
    case SegmentKind::Spike: return "spike";
    case SegmentKind::Plateau: return "plateau";
  }
  return "plateau";
}

Index service_by_name(const Topology& t, const std::string& name) {
  auto idx = t.service_index(name);
  if (!idx) throw InputError("unknown service in scenario: " + name);
  return *idx;
}

}  // namespace

Scenario scenario_from_json(const json& j) {
  try {
    Scenario sc;
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "online_boutique_like")
        sc.cluster = online_boutique_like();
      else if (preset == "sockshop_like")
        sc.cluster = sockshop_like();
      else
        throw InputError("unknown preset: " + preset);
    } else {
      sc.cluster.topology = topology_from_json(j.at("topology"));
      const auto& topo = sc.cluster.topology;
      sc.cluster.services.assign(static_cast<std::size_t>(topo.num_services()), ServiceProfile{});
      for (const auto& [name, cfg] : j.at("services").items()) {
        auto& p = sc.cluster.services[service_by_name(topo, name)];
        p.pods = cfg.value("pods", p.pods);
        p.service_rate = cfg.value("service_rate", p.service_rate);
        p.cpu_per_second = cfg.value("cpu_per_second", p.cpu_per_second);
        p.request_bytes = cfg.value("request_bytes", p.request_bytes);
        p.response_bytes = cfg.value("response_bytes", p.response_bytes);
        p.memory_base = cfg.value("memory_base", p.memory_base);
        p.memory_per_inflight = cfg.value("memory_per_inflight", p.memory_per_inflight);
      }
      for (const auto& r : j.at("requests")) {
        RequestType rt;
        rt.name = r.at("name").get<std::string>();
        rt.entry = service_by_name(topo, r.at("entry").get<std::string>());
        rt.weight = r.at("weight").get<double>();
        for (const auto& c : r.value("calls", json::array()))
          rt.calls.push_back({service_by_name(topo, c.at(0).get<std::string>()),
                              service_by_name(topo, c.at(1).get<std::string>())});
        sc.cluster.requests.push_back(std::move(rt));
      }
    }
    sc.cluster.noise_sigma = j.value("noise_sigma", sc.cluster.noise_sigma);
    sc.cluster.queue_cap = j.value("queue_cap", sc.cluster.queue_cap);
    sc.seed = j.value("seed", sc.seed);
    sc.duration = j.at("duration").get<double>();
    if (!(sc.duration > 0.0)) throw InputError("scenario duration must be > 0");
    if (j.contains("random_profile")) {
      const auto& rp = j.at("random_profile");
      Rng rng(mix_seed(sc.seed, 4));
      sc.profile = ramps_and_spikes(sc.duration, rp.at("base").get<double>(), rp.at("peak").get<double>(), rng);
    }
    for (const auto& s : j.value("profile", json::array())) {
      Segment seg;
      seg.kind = kind_from_string(s.at("kind").get<std::string>());
      seg.duration = s.at("duration").get<double>();
      seg.start_rate = s.at("start_rate").get<double>();
      seg.end_rate = s.value("end_rate", seg.start_rate);
      sc.profile.segments.push_back(seg);
    }
    for (const auto& e : j.value("capacity_events", json::array())) {
      CapacityEvent ev;
      ev.time = e.at("time").get<double>();
      ev.service = service_by_name(sc.cluster.topology, e.at("service").get<std::string>());
      if (e.contains("pods")) ev.pods = e.at("pods").get<int>();
      if (e.contains("speed")) ev.speed = e.at("speed").get<double>();
      sc.cluster.capacity_events.push_back(ev);
    }
    if (j.contains("random_capacity")) {
      const auto& rc = j.at("random_capacity");
      Rng rng(mix_seed(sc.seed, 3));
      auto extra = random_capacity_schedule(sc.cluster, sc.duration, rc.at("interval").get<double>(),
                                            rc.value("min_pods", 1), rc.value("max_pods", 3),
                                            rc.value("min_speed", 0.6), rng);
      sc.cluster.capacity_events.insert(sc.cluster.capacity_events.end(), extra.begin(), extra.end());
    }
    std::stable_sort(sc.cluster.capacity_events.begin(), sc.cluster.capacity_events.end(),
                     [](const CapacityEvent& a, const CapacityEvent& b) { return a.time < b.time; });
    if (sc.profile.segments.empty()) throw InputError("scenario needs a profile or random_profile");
    sc.cluster.validate();
    sc.profile.validate();
    return sc;
  } catch (const json::exception& ex) {
    throw InputError(std::string("bad scenario: ") + ex.what());
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open scenario: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw InputError(std::string("scenario is not valid JSON: ") + ex.what());
  }
  return scenario_from_json(j);
}

json scenario_to_json(const Scenario& s) {
  const auto& topo = s.cluster.topology;
  json services = json::object();
  for (Index v = 0; v < topo.num_services(); ++v) {
    const auto& p = s.cluster.services[v];
    services[topo.services()[v]] = {{"pods", p.pods},
                                    {"service_rate", p.service_rate},
                                    {"cpu_per_second", p.cpu_per_second},
                                    {"request_bytes", p.request_bytes},
                                    {"response_bytes", p.response_bytes},
                                    {"memory_base", p.memory_base},
                                    {"memory_per_inflight", p.memory_per_inflight}};
  }
  json requests = json::array();
  for (const auto& r : s.cluster.requests) {
    json calls = json::array();
    for (const Edge& c : r.calls) calls.push_back({topo.services()[c.source], topo.services()[c.destination]});
    requests.push_back({{"name", r.name}, {"entry", topo.services()[r.entry]}, {"weight", r.weight}, {"calls", calls}});
  }
  json profile = json::array();
  for (const auto& seg : s.profile.segments)
    profile.push_back({{"kind", kind_to_string(seg.kind)},
                       {"duration", seg.duration},
                       {"start_rate", seg.start_rate},
                       {"end_rate", seg.end_rate}});
  json events = json::array();
  for (const auto& ev : s.cluster.capacity_events) {
    json e = {{"time", ev.time}, {"service", topo.services()[ev.service]}};
    if (ev.pods) e["pods"] = *ev.pods;
    if (ev.speed) e["speed"] = *ev.speed;
    events.push_back(e);
  }
  return {{"topology", topology_to_json(topo)},
          {"services", services},
          {"requests", requests},
          {"profile", profile},
          {"capacity_events", events},
          {"noise_sigma", s.cluster.noise_sigma},
          {"queue_cap", s.cluster.queue_cap},
          {"seed", s.seed},
          {"duration", s.duration}};
}

}  // namespace usrf
