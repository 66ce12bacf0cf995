#include "usrf/telemetry.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "usrf/checkpoint.hpp"

namespace usrf {
namespace {

bool is_name_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == ':'; }
bool is_name_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == ':'; }
bool is_label_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_label_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

class LineParser {
 public:
  explicit LineParser(std::string_view s) : s_(s) {}

  MetricSample parse() {
    MetricSample out;
    skip_ws();
    out.name = read_name(is_name_start, is_name_char, "metric name");
    if (peek() == '{') {
      ++pos_;
      skip_ws();
      while (peek() != '}') {
        std::string key = read_name(is_label_start, is_label_char, "label name");
        skip_ws();
        expect('=');
        skip_ws();
        std::string value = read_quoted();
        if (!out.labels.emplace(std::move(key), std::move(value)).second) fail("duplicate label");
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          skip_ws();
        } else if (peek() != '}') {
          fail("expected ',' or '}' in label set");
        }
      }
      ++pos_;
    }
    if (!at_ws()) fail("expected whitespace before value");
    skip_ws();
    out.value = read_number("value");
    skip_ws();
    if (pos_ < s_.size()) {
      out.timestamp = read_number("timestamp");
      skip_ws();
    }
    if (pos_ < s_.size()) fail("trailing characters");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) {
    throw std::invalid_argument(what + " at column " + std::to_string(pos_ + 1));
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  bool at_ws() const { return pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t'); }
  void skip_ws() {
    while (at_ws()) ++pos_;
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  template <typename Start, typename Rest>
  std::string read_name(Start start, Rest rest, const char* what) {
    if (!start(peek())) fail(std::string("bad ") + what);
    const std::size_t b = pos_;
    while (pos_ < s_.size() && rest(s_[pos_])) ++pos_;
    return std::string(s_.substr(b, pos_ - b));
  }

  std::string read_quoted() {
    expect('"');
    std::string out;
    while (true) {
      if (pos_ >= s_.size()) fail("unterminated label value");
      const char c = s_[pos_++];
      if (c == '"') break;
      if (c == '\\') {
        if (pos_ >= s_.size()) fail("dangling escape");
        const char e = s_[pos_++];
        switch (e) {
          case '\\': out.push_back('\\'); break;
          case '"': out.push_back('"'); break;
          case 'n': out.push_back('\n'); break;
          default: fail(std::string("unknown escape \\") + e);
        }
      } else {
        out.push_back(c);
      }
    }
    return out;
  }

  double read_number(const char* what) {
    const std::size_t b = pos_;
    while (pos_ < s_.size() && !at_ws()) ++pos_;
    const std::string tok(s_.substr(b, pos_ - b));
    if (tok.empty()) fail(std::string("missing ") + what);
    if (tok == "+Inf" || tok == "Inf") return std::numeric_limits<double>::infinity();
    if (tok == "-Inf") return -std::numeric_limits<double>::infinity();
    if (tok == "NaN") return std::numeric_limits<double>::quiet_NaN();
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) fail(std::string("bad ") + what + " '" + tok + "'");
    return v;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

std::string escape_label(const std::string& v) {
  std::string out;
  out.reserve(v.size());
  for (char c : v) {
    if (c == '\\')
      out += "\\\\";
    else if (c == '"')
      out += "\\\"";
    else if (c == '\n')
      out += "\\n";
    else
      out.push_back(c);
  }
  return out;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "+Inf" : "-Inf";
  return format_double(v);
}

}  // namespace

ParseResult parse_exposition(std::string_view text, const ParseOptions& opts) {
  ParseResult result;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] == '#') {
      if (nl == text.size()) break;
      continue;
    }
    try {
      result.samples.push_back(LineParser(line).parse());
    } catch (const std::invalid_argument& ex) {
      const std::string msg = std::string(ex.what()) + ": " + std::string(line);
      if (opts.strict) throw ParseError(line_no, msg);
      ++result.skipped;
      result.errors.push_back("line " + std::to_string(line_no) + ": " + msg);
    }
    if (nl == text.size()) break;
  }
  return result;
}

std::string format_sample(const MetricSample& s) {
  std::string out = s.name;
  if (!s.labels.empty()) {
    out.push_back('{');
    bool first = true;
    for (const auto& [k, v] : s.labels) {
      if (!first) out.push_back(',');
      first = false;
      out += k;
      out += "=\"";
      out += escape_label(v);
      out.push_back('"');
    }
    out.push_back('}');
  }
  out.push_back(' ');
  out += format_value(s.value);
  if (s.timestamp) {
    out.push_back(' ');
    out += format_value(*s.timestamp);
  }
  return out;
}

void write_exposition(std::ostream& out, std::span<const MetricSample> samples) {
  for (const auto& s : samples) out << format_sample(s) << '\n';
}

namespace {

std::span<const TimedValue> in_window(std::span<const TimedValue> series, double start, double end) {
  auto lo = std::lower_bound(series.begin(), series.end(), start,
                             [](const TimedValue& tv, double t) { return tv.time < t; });
  auto hi = std::upper_bound(lo, series.end(), end, [](double t, const TimedValue& tv) { return t < tv.time; });
  return {lo, hi};
}

}  // namespace

std::optional<double> counter_to_rate(std::span<const TimedValue> series, double start, double end) {
  if (!(end > start)) throw InputError("counter_to_rate: window end must exceed start");
  const auto w = in_window(series, start, end);
  if (w.size() < 2) return std::nullopt;
  double increase = 0.0;
  for (std::size_t i = 1; i < w.size(); ++i) {
    const double d = w[i].value - w[i - 1].value;
    increase += d >= 0.0 ? d : w[i].value;
  }
  return increase / (end - start);
}

std::optional<double> gauge_mean(std::span<const TimedValue> series, double start, double end) {
  const auto w = in_window(series, start, end);
  if (w.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& tv : w) s += tv.value;
  return s / static_cast<double>(w.size());
}

void WindowSpec::validate() const {
  if (!(stride > 0.0 && stride <= length)) throw InputError("window spec requires 0 < stride <= length");
}

std::size_t window_count(double duration, const WindowSpec& spec) {
  spec.validate();
  if (duration < spec.length) return 0;
  return static_cast<std::size_t>(std::floor((duration - spec.length) / spec.stride + 1e-9)) + 1;
}

std::vector<Window> sliding_windows(double duration, const WindowSpec& spec) {
  const std::size_t n = window_count(duration, spec);
  std::vector<Window> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double start = static_cast<double>(k) * spec.stride;
    out.push_back({start, start + spec.length});
  }
  return out;
}

std::optional<double> window_p95(std::span<const double> latencies) {
  if (latencies.empty()) return std::nullopt;
  std::vector<double> buf(latencies.begin(), latencies.end());
  return nearest_rank(buf, 95, 100);
}

void write_latency_csv(std::ostream& out, std::span<const LatencyRecord> records) {
  out << "timestamp,latency_seconds\n";
  for (const auto& r : records) out << format_double(r.timestamp) << ',' << format_double(r.latency) << '\n';
}

std::vector<LatencyRecord> read_latency_csv(std::istream& in) {
  std::vector<LatencyRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("timestamp", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(line_no, "expected 'timestamp,latency_seconds': " + line);
    LatencyRecord r;
    char* end = nullptr;
    const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
    r.timestamp = std::strtod(a.c_str(), &end);
    if (a.empty() || end != a.c_str() + a.size()) throw ParseError(line_no, "bad timestamp '" + a + "'");
    r.latency = std::strtod(b.c_str(), &end);
    if (b.empty() || end != b.c_str() + b.size()) throw ParseError(line_no, "bad latency '" + b + "'");
    if (!(std::isfinite(r.latency) && r.latency > 0.0)) throw ParseError(line_no, "latency must be finite and > 0");
    out.push_back(r);
  }
  return out;
}

namespace {

enum class ResourceMetric { Cpu, Memory, CpuPeriod, NetRx, NetTx };
enum class TrafficMetric { Requests, RequestBytes, ResponseBytes };

std::optional<ResourceMetric> resource_metric(std::string_view name) {
  if (name == metric::kCpuSeconds) return ResourceMetric::Cpu;
  if (name == metric::kMemoryBytes) return ResourceMetric::Memory;
  if (name == metric::kCpuPeriod) return ResourceMetric::CpuPeriod;
  if (name == metric::kNetReceiveBytes) return ResourceMetric::NetRx;
  if (name == metric::kNetTransmitBytes) return ResourceMetric::NetTx;
  return std::nullopt;
}

std::optional<TrafficMetric> traffic_metric(std::string_view name) {
  if (name == metric::kRequests) return TrafficMetric::Requests;
  if (name == metric::kRequestBytes) return TrafficMetric::RequestBytes;
  if (name == metric::kResponseBytes) return TrafficMetric::ResponseBytes;
  return std::nullopt;
}

// Source index -1 marks traffic from outside the mesh.
struct TrafficSeries {
  Index source = -1;
  Index destination = 0;
  std::optional<Index> edge;
  std::vector<TimedValue> points;
};

void sort_series(std::vector<TimedValue>& pts) {
  std::stable_sort(pts.begin(), pts.end(), [](const TimedValue& a, const TimedValue& b) { return a.time < b.time; });
}

}  // namespace

IngestResult build_snapshots(std::span<const MetricSample> samples, std::span<const LatencyRecord> latencies,
                             const Topology& topology, const IngestOptions& opts) {
  opts.window.validate();
  IngestResult result;
  result.dataset.topology = topology;
  result.dataset.schema = FeatureSchema{};
  const Index nv = topology.num_services();
  const Index ne = topology.num_edges();

  // resource[metric][service]
  std::vector<std::vector<std::vector<TimedValue>>> resource(5, std::vector<std::vector<TimedValue>>(nv));
  // traffic[metric] keyed by (source, destination)
  std::vector<std::map<std::pair<Index, Index>, TrafficSeries>> traffic(3);

  auto reject = [&](const MetricSample& s, const std::string& why) {
    if (opts.strict) throw SchemaError(why + ": " + format_sample(s));
    ++result.unknown_series_samples;
  };

  double t_min = std::numeric_limits<double>::infinity();
  double t_max = -std::numeric_limits<double>::infinity();
  for (const auto& s : samples) {
    const auto rm = resource_metric(s.name);
    const auto tm = traffic_metric(s.name);
    if (!rm && !tm) {
      ++result.ignored_samples;
      continue;
    }
    if (!s.timestamp) {
      reject(s, "sample without timestamp");
      continue;
    }
    const double t = *s.timestamp;
    if (!std::isfinite(s.value) || s.value < 0.0) {
      reject(s, "negative or non-finite metric value");
      continue;
    }
    if (rm) {
      auto it = s.labels.find(std::string(metric::kWorkloadLabel));
      std::optional<Index> svc;
      if (it != s.labels.end()) svc = topology.service_index(it->second);
      if (!svc) {
        reject(s, "unknown service");
        continue;
      }
      resource[static_cast<int>(*rm)][*svc].push_back({t, s.value});
    } else {
      auto src_it = s.labels.find(std::string(metric::kSourceLabel));
      auto dst_it = s.labels.find(std::string(metric::kDestinationLabel));
      if (src_it == s.labels.end() || dst_it == s.labels.end()) {
        reject(s, "traffic sample without source/destination labels");
        continue;
      }
      const auto dst = topology.service_index(dst_it->second);
      if (!dst) {
        reject(s, "unknown destination service");
        continue;
      }
      Index src = -1;
      std::optional<Index> edge;
      if (src_it->second != metric::kExternalSource) {
        const auto si = topology.service_index(src_it->second);
        if (!si) {
          reject(s, "unknown source service");
          continue;
        }
        edge = topology.edge_index(*si, *dst);
        if (!edge) {
          reject(s, "edge not in topology");
          continue;
        }
        src = *si;
      }
      auto& series = traffic[static_cast<int>(*tm)][{src, *dst}];
      series.source = src;
      series.destination = *dst;
      series.edge = edge;
      series.points.push_back({t, s.value});
    }
    t_min = std::min(t_min, t);
    t_max = std::max(t_max, t);
  }
  for (auto& per_metric : resource)
    for (auto& pts : per_metric) sort_series(pts);
  for (auto& per_metric : traffic)
    for (auto& [_, series] : per_metric) sort_series(series.points);

  std::vector<LatencyRecord> lat(latencies.begin(), latencies.end());
  std::stable_sort(lat.begin(), lat.end(),
                   [](const LatencyRecord& a, const LatencyRecord& b) { return a.timestamp < b.timestamp; });

  if (!std::isfinite(t_min)) return result;
  const auto windows = sliding_windows(t_max - t_min, opts.window);
  result.windows_total = windows.size();
  std::vector<double> buf;

  for (const Window& w : windows) {
    const double a = t_min + w.start;
    const double b = t_min + w.end;
    Snapshot snap;
    snap.window_start = a;
    snap.resource_features.resize(nv, 5);
    bool complete = true;
    for (Index v = 0; v < nv && complete; ++v) {
      for (int m = 0; m < 5 && complete; ++m) {
        const auto& pts = resource[m][v];
        const bool gauge = m == static_cast<int>(ResourceMetric::Memory) || m == static_cast<int>(ResourceMetric::CpuPeriod);
        const auto val = gauge ? gauge_mean(pts, a, b) : counter_to_rate(pts, a, b);
        if (!val) {
          complete = false;
          break;
        }
        snap.resource_features(v, m) = *val;
      }
    }
    if (!complete) {
      ++result.dropped_missing_metrics;
      continue;
    }

    snap.node_features = Matrix::Zero(nv, 3);
    snap.edge_features = Matrix::Zero(ne, 3);
    for (int m = 0; m < 3; ++m) {
      for (const auto& [_, series] : traffic[m]) {
        const double rate = counter_to_rate(series.points, a, b).value_or(0.0);
        snap.node_features(series.destination, m) += rate;
        if (series.edge) snap.edge_features(*series.edge, m) += rate;
      }
    }

    auto lo = std::lower_bound(lat.begin(), lat.end(), a,
                               [](const LatencyRecord& r, double t) { return r.timestamp < t; });
    auto hi = std::lower_bound(lo, lat.end(), b, [](const LatencyRecord& r, double t) { return r.timestamp < t; });
    buf.clear();
    for (auto it = lo; it != hi; ++it) buf.push_back(it->latency);
    if (buf.empty()) {
      ++result.dropped_no_latency;
      continue;
    }
    snap.label = nearest_rank(buf, 95, 100);
    result.dataset.snapshots.push_back(std::move(snap));
  }
  return result;
}

}  // namespace usrf
