#include "usrf/fusion.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "usrf/checkpoint.hpp"
#include "usrf/error.hpp"

namespace usrf {

using nlohmann::json;

void HidacConfig::validate() const {
  if (d_emb < 1 || tokens < 1 || d_emb % tokens != 0) throw InputError("HIDAC tokens must divide d_emb");
  if (rank < 1) throw InputError("HIDAC rank must be >= 1");
  if (out_width < 1) throw InputError("HIDAC output width must be >= 1");
}

CrossAttention CrossAttention::create(ParameterStore& store, const std::string& name, Index d_emb, Index tokens,
                                      Rng& rng) {
  CrossAttention ca;
  const Index td = d_emb / tokens;
  ca.query = Linear::create(store, name + ".query", td, td, rng);
  ca.key = Linear::create(store, name + ".key", td, td, rng);
  ca.value = Linear::create(store, name + ".value", td, td, rng);
  ca.tokens = tokens;
  return ca;
}

Tensor CrossAttention::forward(const ForwardContext& ctx, const Tensor& q, const Tensor& kv,
                               Matrix* attention_out) const {
  Tape& tape = *ctx.tape;
  if (q.rows() != kv.rows() || q.cols() != kv.cols() || q.cols() % tokens != 0)
    throw DimensionError("cross attention: " + shape_string(q.value()) + " vs " + shape_string(kv.value()));
  const Index batch = q.rows();
  const Index td = q.cols() / tokens;
  const Tensor qt = query(tape, reshape(q, batch * tokens, td));
  const Tensor kvt = reshape(kv, batch * tokens, td);
  const Tensor kt = key(tape, kvt);
  const Tensor vt = value(tape, kvt);
  const Tensor scores = scale(block_matmul(qt, kt, batch, true), 1.0 / std::sqrt(static_cast<double>(td)));
  const Tensor attn = softmax(scores, 1);
  if (attention_out) *attention_out = attn.value();
  return reshape(block_matmul(attn, vt, batch, false), batch, q.cols());
}

Mlp2 Mlp2::create(ParameterStore& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng) {
  Mlp2 m;
  m.first = Linear::create(store, name + ".0", in, hidden, rng);
  m.second = Linear::create(store, name + ".1", hidden, out, rng);
  return m;
}

Tensor Mlp2::forward(Tape& tape, const Tensor& x) const { return second(tape, gelu(first(tape, x))); }

Hidac Hidac::create(ParameterStore& store, const std::string& name, const HidacConfig& cfg, Rng& rng) {
  cfg.validate();
  Hidac h;
  h.cfg = cfg;
  h.traffic_attn = CrossAttention::create(store, name + ".attn_traffic", cfg.d_emb, cfg.tokens, rng);
  h.resource_attn = CrossAttention::create(store, name + ".attn_resource", cfg.d_emb, cfg.tokens, rng);
  h.mlp_traffic = Mlp2::create(store, name + ".mlp_traffic", cfg.d_emb, cfg.d_emb, cfg.rank, rng);
  h.mlp_resource = Mlp2::create(store, name + ".mlp_resource", cfg.d_emb, cfg.d_emb, cfg.rank, rng);
  h.mlp_out = Mlp2::create(store, name + ".mlp_out", cfg.rank, cfg.out_width, cfg.out_width, rng);
  return h;
}

HidacOutput Hidac::forward(const ForwardContext& ctx, const Tensor& z_t, const Tensor& z_r) const {
  Tape& tape = *ctx.tape;
  HidacOutput o;
  o.z_t_prime = z_t + traffic_attn.forward(ctx, z_t, z_r);
  o.z_r_prime = z_r + resource_attn.forward(ctx, z_r, z_t);
  o.f_t = mlp_traffic.forward(tape, o.z_t_prime);
  o.f_r = mlp_resource.forward(tape, o.z_r_prime);
  o.z_f = mlp_out.forward(tape, mul(o.f_t, o.f_r));
  return o;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::TrafficOnly: return "traffic_only";
    case Variant::ResourceOnly: return "resource_only";
    case Variant::SimpleFused: return "simple_fused";
    case Variant::GnnFused: return "gnn_fused";
    case Variant::SingleStream: return "single_stream";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : all_variants())
    if (variant_name(v) == name) return v;
  throw InputError("unknown variant: " + std::string(name));
}

std::vector<Variant> all_variants() {
  return {Variant::Full,        Variant::TrafficOnly, Variant::ResourceOnly,
          Variant::SimpleFused, Variant::GnnFused,    Variant::SingleStream};
}

void ModelConfig::validate() const {
  traffic.validate();
  resource.validate();
  hidac.validate();
  if (head_hidden < 1) throw InputError("head width must be >= 1");
  const bool fused = variant == Variant::Full || variant == Variant::GnnFused || variant == Variant::SimpleFused;
  if (fused && traffic.d_emb != (variant == Variant::GnnFused ? resource_graph.d_emb : resource.d_emb))
    throw InputError("stream embeddings must have equal width");
  if ((variant == Variant::Full || variant == Variant::GnnFused) && hidac.d_emb != traffic.d_emb)
    throw InputError("HIDAC width must match the stream embeddings");
  if (variant == Variant::GnnFused) resource_graph.validate();
}

ModelConfig default_model_config(Variant v, const Topology& topo, const FeatureSchema& schema, bool sockshop_sized) {
  ModelConfig c;
  c.variant = v;
  c.traffic.num_layers = sockshop_sized ? 3 : 4;
  c.traffic.node_dim = schema.node_dim;
  c.traffic.edge_dim = schema.edge_dim;
  if (v == Variant::SingleStream) c.traffic.node_dim = schema.node_dim + schema.resource_dim;
  c.resource.num_blocks = sockshop_sized ? 5 : 4;
  c.resource.resource_dim = schema.resource_dim;
  c.resource.positions = topo.num_services();
  c.hidac.rank = sockshop_sized ? 8 : 4;
  c.resource_graph = c.traffic;
  c.resource_graph.node_dim = schema.resource_dim;
  c.resource_graph.edge_dim = 0;
  c.validate();
  return c;
}

json model_config_to_json(const ModelConfig& c) {
  return {{"variant", variant_name(c.variant)},
          {"traffic", to_json(c.traffic)},
          {"resource", to_json(c.resource)},
          {"hidac",
           {{"d_emb", c.hidac.d_emb},
            {"tokens", c.hidac.tokens},
            {"rank", c.hidac.rank},
            {"out_width", c.hidac.out_width}}},
          {"head_hidden", c.head_hidden},
          {"resource_graph", to_json(c.resource_graph)}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.traffic = traffic_config_from_json(j.at("traffic"));
    c.resource = resource_config_from_json(j.at("resource"));
    const auto& h = j.at("hidac");
    c.hidac.d_emb = h.value("d_emb", c.hidac.d_emb);
    c.hidac.tokens = h.value("tokens", c.hidac.tokens);
    c.hidac.rank = h.value("rank", c.hidac.rank);
    c.hidac.out_width = h.value("out_width", c.hidac.out_width);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    if (j.contains("resource_graph")) c.resource_graph = traffic_config_from_json(j.at("resource_graph"));
    c.validate();
    return c;
  } catch (const json::exception& ex) {
    throw InputError(std::string("bad model config: ") + ex.what());
  }
}

Model::Model(const ModelConfig& cfg, const Topology& topo, std::uint64_t seed) : cfg_(cfg), topology_(topo) {
  cfg_.validate();
  if (cfg_.resource.positions != topo.num_services())
    throw ArtifactMismatchError("resource encoder positions " + std::to_string(cfg_.resource.positions) +
                                " != service count " + std::to_string(topo.num_services()));
  Rng rng(seed);
  const Variant v = cfg_.variant;
  const bool uses_traffic = v != Variant::ResourceOnly;
  const bool uses_gmlp = v == Variant::Full || v == Variant::ResourceOnly || v == Variant::SimpleFused;
  if (uses_traffic) traffic_.emplace(store_, "traffic", cfg_.traffic, topo, rng);
  if (uses_gmlp) resource_.emplace(store_, "resource", cfg_.resource, rng);
  if (v == Variant::GnnFused) resource_graph_.emplace(store_, "resource_graph", cfg_.resource_graph, topo, rng);
  Index head_in = cfg_.traffic.d_emb;
  if (v == Variant::Full || v == Variant::GnnFused) {
    hidac_ = Hidac::create(store_, "hidac", cfg_.hidac, rng);
    head_in = cfg_.hidac.out_width;
  } else if (v == Variant::ResourceOnly) {
    head_in = cfg_.resource.d_emb;
  }
  head_ = Mlp2::create(store_, "head", head_in, cfg_.head_hidden, 1, rng);
}

ForwardOutput Model::forward(const ForwardContext& ctx, const Tensor& x, const Tensor& e, const Tensor& r,
                             Index batch) const {
  Tape& tape = *ctx.tape;
  ForwardOutput o;
  switch (cfg_.variant) {
    case Variant::Full:
    case Variant::GnnFused: {
      o.z_t = traffic_->forward(ctx, x, e, batch);
      if (resource_graph_) {
        const Tensor no_edges = tape.constant(Matrix(batch * topology_.num_edges(), 0));
        o.z_r = resource_graph_->forward(ctx, r, no_edges, batch);
      } else {
        o.z_r = resource_->forward(ctx, r, batch);
      }
      HidacOutput h = hidac_->forward(ctx, o.z_t, o.z_r);
      o.z_t_prime = h.z_t_prime;
      o.z_r_prime = h.z_r_prime;
      o.z_f = h.z_f;
      break;
    }
    case Variant::TrafficOnly:
      o.z_t = traffic_->forward(ctx, x, e, batch);
      o.z_f = o.z_t;
      break;
    case Variant::ResourceOnly:
      o.z_r = resource_->forward(ctx, r, batch);
      o.z_f = o.z_r;
      break;
    case Variant::SimpleFused:
      o.z_t = traffic_->forward(ctx, x, e, batch);
      o.z_r = resource_->forward(ctx, r, batch);
      o.z_f = o.z_t + o.z_r;
      break;
    case Variant::SingleStream:
      o.z_t = traffic_->forward(ctx, concat_cols({x, r}), e, batch);
      o.z_f = o.z_t;
      break;
  }
  o.prediction = softplus(head_.forward(tape, o.z_f));
  return o;
}

ForwardOutput Model::forward(const ForwardContext& ctx, const GraphBatch& batch) const {
  if (batch.num_services != topology_.num_services() || batch.num_edges != topology_.num_edges())
    throw ArtifactMismatchError("batch topology does not match the model");
  Tape& tape = *ctx.tape;
  return forward(ctx, tape.constant(batch.node_features), tape.constant(batch.edge_features),
                 tape.constant(batch.resource_features), batch.batch);
}

Model build_variant(Variant v, const ModelConfig& base, const Topology& topo, std::uint64_t seed) {
  ModelConfig cfg = base;
  if (cfg.variant == Variant::SingleStream && v != Variant::SingleStream)
    cfg.traffic.node_dim -= cfg.resource.resource_dim;
  else if (cfg.variant != Variant::SingleStream && v == Variant::SingleStream)
    cfg.traffic.node_dim += cfg.resource.resource_dim;
  cfg.variant = v;
  return Model(cfg, topo, seed);
}

namespace {

template <typename Fn>
void for_each_batch(const Model& model, std::span<const Snapshot> snaps, Index batch_size, Fn&& fn) {
  if (batch_size < 1) throw InputError("batch size must be >= 1");
  for (std::size_t start = 0; start < snaps.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(snaps.size() - start, static_cast<std::size_t>(batch_size));
    const GraphBatch b = make_batch(snaps.subspan(start, n), model.topology());
    Tape tape;
    ForwardContext ctx{&tape, false, nullptr};
    fn(b, model.forward(ctx, b));
  }
}

Vector row_of(const Tensor& t, Index i) {
  if (!t.valid()) return {};
  return t.value().row(i).transpose();
}

}  // namespace

std::vector<double> predict_latency(const Model& model, std::span<const Snapshot> snaps, Index batch_size) {
  std::vector<double> out;
  out.reserve(snaps.size());
  for_each_batch(model, snaps, batch_size, [&](const GraphBatch&, const ForwardOutput& o) {
    for (Index i = 0; i < o.prediction.rows(); ++i) out.push_back(o.prediction.value()(i, 0));
  });
  return out;
}

double predict_latency(const Model& model, const Snapshot& snap) {
  return predict_latency(model, std::span<const Snapshot>(&snap, 1), 1).front();
}

std::vector<SystemEmbedding> export_embedding(const Model& model, std::span<const Snapshot> snaps, Index batch_size) {
  std::vector<SystemEmbedding> out;
  out.reserve(snaps.size());
  for_each_batch(model, snaps, batch_size, [&](const GraphBatch& b, const ForwardOutput& o) {
    for (Index i = 0; i < b.batch; ++i) {
      SystemEmbedding e;
      e.window_start = b.window_starts[static_cast<std::size_t>(i)];
      e.z_f = row_of(o.z_f, i);
      e.z_t = row_of(o.z_t, i);
      e.z_t_prime = row_of(o.z_t_prime, i);
      e.z_r = row_of(o.z_r, i);
      e.z_r_prime = row_of(o.z_r_prime, i);
      out.push_back(std::move(e));
    }
  });
  return out;
}

void write_embedding_csv(std::ostream& out, std::span<const SystemEmbedding> rows) {
  const Index width = rows.empty() ? 0 : rows.front().z_f.size();
  out << "window_start";
  for (Index i = 0; i < width; ++i) out << ",z_f_" << i;
  out << '\n';
  for (const auto& r : rows) {
    if (r.z_f.size() != width) throw DimensionError("embedding rows differ in width");
    out << format_double(r.window_start);
    for (Index i = 0; i < width; ++i) out << ',' << format_double(r.z_f(i));
    out << '\n';
  }
}

std::vector<SystemEmbedding> read_embedding_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("window_start", 0) != 0)
    throw ParseError(1, "embedding CSV must start with a window_start header");
  const auto width = static_cast<Index>(std::count(line.begin(), line.end(), ','));
  std::vector<SystemEmbedding> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError(lineno, "bad number '" + cell + "'");
      }
    }
    if (static_cast<Index>(vals.size()) != width + 1)
      throw ParseError(lineno, "expected " + std::to_string(width + 1) + " columns");
    SystemEmbedding e;
    e.window_start = vals[0];
    e.z_f = Eigen::Map<const Vector>(vals.data() + 1, width);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace usrf
