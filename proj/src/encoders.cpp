#include "usrf/encoders.hpp"

#include <cmath>

#include "usrf/error.hpp"

namespace usrf {

using nlohmann::json;

Matrix glorot_uniform(Index in, Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < in; ++i)
    for (Index j = 0; j < out; ++j) w(i, j) = rng.uniform(-limit, limit);
  return w;
}

Linear Linear::create(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
                      bool with_bias) {
  Linear l;
  l.weight = &store.add(name + ".weight", glorot_uniform(in, out, rng));
  if (with_bias) l.bias = &store.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Tensor Linear::operator()(Tape& tape, const Tensor& x) const {
  if (bias) return affine(x, tape.param(*weight), tape.param(*bias));
  return matmul(x, tape.param(*weight));
}

LayerNormParams LayerNormParams::create(ParameterStore& store, const std::string& name, Index width) {
  LayerNormParams n;
  n.gain = &store.add(name + ".gain", Matrix::Ones(1, width));
  n.bias = &store.add(name + ".bias", Matrix::Zero(1, width));
  return n;
}

Tensor LayerNormParams::operator()(Tape& tape, const Tensor& x) const {
  return layer_norm(x, tape.param(*gain), tape.param(*bias));
}

GraphBatch make_batch(std::span<const Snapshot* const> snaps, const Topology& topo) {
  if (snaps.empty()) throw EmptyResultError("empty batch");
  GraphBatch b;
  b.batch = static_cast<Index>(snaps.size());
  b.num_services = topo.num_services();
  b.num_edges = topo.num_edges();
  const Index dn = snaps[0]->node_features.cols();
  const Index de = snaps[0]->edge_features.cols();
  const Index dr = snaps[0]->resource_features.cols();
  b.node_features.resize(b.batch * b.num_services, dn);
  b.edge_features.resize(b.batch * b.num_edges, de);
  b.resource_features.resize(b.batch * b.num_services, dr);
  bool labeled = true;
  for (Index i = 0; i < b.batch; ++i) {
    const Snapshot& s = *snaps[i];
    if (s.node_features.rows() != b.num_services || s.node_features.cols() != dn ||
        s.edge_features.rows() != b.num_edges || s.edge_features.cols() != de ||
        s.resource_features.rows() != b.num_services || s.resource_features.cols() != dr)
      throw DimensionError("snapshot shape does not match the batch topology");
    b.node_features.middleRows(i * b.num_services, b.num_services) = s.node_features;
    if (b.num_edges > 0) b.edge_features.middleRows(i * b.num_edges, b.num_edges) = s.edge_features;
    b.resource_features.middleRows(i * b.num_services, b.num_services) = s.resource_features;
    b.window_starts.push_back(s.window_start);
    if (s.label)
      b.labels.push_back(*s.label);
    else
      labeled = false;
  }
  if (!labeled) b.labels.clear();
  return b;
}

GraphBatch make_batch(std::span<const Snapshot> snaps, const Topology& topo) {
  std::vector<const Snapshot*> ptrs;
  ptrs.reserve(snaps.size());
  for (const auto& s : snaps) ptrs.push_back(&s);
  return make_batch(std::span<const Snapshot* const>(ptrs), topo);
}

MessageGraph make_message_graph(const Topology& topo, Index batch, bool reverse) {
  const Index nv = topo.num_services();
  std::vector<Index> src, dst;
  std::vector<char> has_in(static_cast<std::size_t>(nv), 0);
  for (const Edge& e : topo.edges()) has_in[reverse ? e.source : e.destination] = 1;
  for (Index b = 0; b < batch; ++b)
    for (const Edge& e : topo.edges()) {
      src.push_back(b * nv + (reverse ? e.destination : e.source));
      dst.push_back(b * nv + (reverse ? e.source : e.destination));
    }
  MessageGraph g;
  g.num_real = static_cast<Index>(src.size());
  for (Index b = 0; b < batch; ++b)
    for (Index v = 0; v < nv; ++v)
      if (!has_in[v]) {
        src.push_back(b * nv + v);
        dst.push_back(b * nv + v);
      }
  g.num_self = static_cast<Index>(src.size()) - g.num_real;
  g.num_nodes = batch * nv;
  g.source = make_index_list(std::move(src));
  g.target = make_index_list(std::move(dst));
  return g;
}

void TrafficEncoderConfig::validate() const {
  if (num_layers < 1) throw InputError("traffic encoder needs at least one layer");
  if (node_dim < 1 || edge_dim < 0 || d_emb < 1) throw InputError("traffic encoder dimensions must be positive");
  if (heads < 1 || d_emb % heads != 0) throw InputError("d_emb must be divisible by the head count");
  if (dropout < 0.0 || dropout >= 1.0) throw InputError("dropout must be in [0, 1)");
}

GraphTransformerLayer GraphTransformerLayer::create(ParameterStore& store, const std::string& name, Index d,
                                                    Index edge_dim, Index heads, double dropout, Rng& rng) {
  GraphTransformerLayer l;
  l.query = Linear::create(store, name + ".query", d, d, rng);
  l.key = Linear::create(store, name + ".key", d, d, rng);
  l.value = Linear::create(store, name + ".value", d, d, rng);
  if (edge_dim > 0) {
    l.edge_key = Linear::create(store, name + ".edge_key", edge_dim, d, rng, false);
    l.edge_value = Linear::create(store, name + ".edge_value", edge_dim, d, rng, false);
  }
  l.self_key = &store.add(name + ".self_key", Matrix::Zero(1, d));
  l.self_value = &store.add(name + ".self_value", Matrix::Zero(1, d));
  l.norm = LayerNormParams::create(store, name + ".norm", d);
  l.heads = heads;
  l.edge_dim = edge_dim;
  l.dropout = dropout;
  return l;
}

Tensor GraphTransformerLayer::forward(const ForwardContext& ctx, const Tensor& h, const Tensor& edges,
                                      const MessageGraph& g, Matrix* attention_out) const {
  Tape& tape = *ctx.tape;
  if (h.rows() != g.num_nodes) throw DimensionError("graph layer: node rows " + std::to_string(h.rows()) +
                                                    " != " + std::to_string(g.num_nodes));
  if (edge_dim > 0 && (edges.rows() != g.num_real || edges.cols() != edge_dim))
    throw DimensionError("graph layer: edge features must be " + std::to_string(g.num_real) + "x" +
                         std::to_string(edge_dim));
  const Index d = h.cols();
  const Tensor q = query(tape, h);
  const Tensor k = key(tape, h);
  const Tensor v = value(tape, h);

  Tensor k_edge = gather_rows(k, g.source);
  Tensor v_edge = gather_rows(v, g.source);
  std::vector<Tensor> key_extra, value_extra;
  if (g.num_real > 0) {
    if (edge_dim > 0) {
      key_extra.push_back(edge_key(tape, edges));
      value_extra.push_back(edge_value(tape, edges));
    } else {
      key_extra.push_back(tape.constant(Matrix::Zero(g.num_real, d)));
      value_extra.push_back(tape.constant(Matrix::Zero(g.num_real, d)));
    }
  }
  if (g.num_self > 0) {
    const auto zeros = make_index_list(std::vector<Index>(static_cast<std::size_t>(g.num_self), 0));
    key_extra.push_back(gather_rows(tape.param(*self_key), zeros));
    value_extra.push_back(gather_rows(tape.param(*self_value), zeros));
  }
  k_edge = k_edge + concat_rows(key_extra);
  v_edge = v_edge + concat_rows(value_extra);

  const Tensor q_edge = gather_rows(q, g.target);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Tensor scores = scale(head_dot(q_edge, k_edge, heads), inv_sqrt);
  const Tensor alpha = segment_softmax(scores, g.target, g.num_nodes);
  if (attention_out) *attention_out = alpha.value();
  Tensor agg = scatter_add_rows(head_scale(v_edge, alpha, heads), g.target, g.num_nodes);
  if (dropout > 0.0 && ctx.training) agg = usrf::dropout(agg, dropout, true, *ctx.rng);
  return norm(tape, h + agg);
}

AttentionPool AttentionPool::create(ParameterStore& store, const std::string& name, Index d, Rng& rng) {
  AttentionPool p;
  p.score_hidden = Linear::create(store, name + ".hidden", d, d, rng);
  p.score_out = Linear::create(store, name + ".score", d, 1, rng, false);
  return p;
}

namespace {

IndexList graph_segments(Index batch, Index per_graph) {
  std::vector<Index> seg(static_cast<std::size_t>(batch * per_graph));
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < per_graph; ++i) seg[static_cast<std::size_t>(b * per_graph + i)] = b;
  return make_index_list(std::move(seg));
}

}  // namespace

Tensor AttentionPool::forward(const ForwardContext& ctx, const Tensor& h, Index batch, Matrix* weights_out) const {
  Tape& tape = *ctx.tape;
  if (batch < 1 || h.rows() % batch != 0 || h.rows() == 0)
    throw DimensionError("attention pool: rows not divisible into " + std::to_string(batch) + " graphs");
  const auto seg = graph_segments(batch, h.rows() / batch);
  const Tensor s = score_out(tape, usrf::tanh(score_hidden(tape, h)));
  const Tensor a = segment_softmax(s, seg, batch);
  if (weights_out) *weights_out = a.value();
  return segment_sum(scale_rows(h, a), seg, batch);
}

TrafficEncoder::TrafficEncoder(ParameterStore& store, const std::string& name, const TrafficEncoderConfig& cfg,
                               const Topology& topo, Rng& rng)
    : cfg_(cfg), topology_(topo) {
  cfg_.validate();
  input_ = Linear::create(store, name + ".input", cfg.node_dim, cfg.d_emb, rng);
  for (Index l = 0; l < cfg.num_layers; ++l)
    layers_.push_back(GraphTransformerLayer::create(store, name + ".layer" + std::to_string(l), cfg.d_emb,
                                                    cfg.edge_dim, cfg.heads, cfg.dropout, rng));
  pool_ = AttentionPool::create(store, name + ".pool", cfg.d_emb, rng);
}

const MessageGraph& TrafficEncoder::message_graph(Index batch) const {
  const auto b = static_cast<std::size_t>(batch);
  if (graph_cache_.size() <= b) graph_cache_.resize(b + 1);
  if (!graph_cache_[b].source) graph_cache_[b] = make_message_graph(topology_, batch, cfg_.reverse_messages);
  return graph_cache_[b];
}

Tensor TrafficEncoder::forward(const ForwardContext& ctx, const Tensor& x, const Tensor& e, Index batch) const {
  if (x.cols() != cfg_.node_dim) throw DimensionError("traffic encoder: node feature width " +
                                                      std::to_string(x.cols()) + " != " +
                                                      std::to_string(cfg_.node_dim));
  const MessageGraph& g = message_graph(batch);
  Tensor h = input_(*ctx.tape, x);
  for (const auto& layer : layers_) h = layer.forward(ctx, h, e, g);
  return pool_.forward(ctx, h, batch);
}

void ResourceEncoderConfig::validate() const {
  if (num_blocks < 1) throw InputError("resource encoder needs at least one block");
  if (resource_dim < 1 || d_model < 1 || d_emb < 1 || positions < 1)
    throw InputError("resource encoder dimensions must be positive");
  if (ffn_factor < 1 || (d_model * ffn_factor) % 2 != 0) throw InputError("gMLP width must be even");
  if (dropout < 0.0 || dropout >= 1.0) throw InputError("dropout must be in [0, 1)");
}

GmlpBlock GmlpBlock::create(ParameterStore& store, const std::string& name, Index d, Index ffn, Index positions,
                            double dropout, Rng& rng) {
  GmlpBlock blk;
  blk.norm_in = LayerNormParams::create(store, name + ".norm_in", d);
  blk.proj_in = Linear::create(store, name + ".proj_in", d, ffn, rng);
  blk.norm_gate = LayerNormParams::create(store, name + ".norm_gate", ffn / 2);
  Matrix ws(positions, positions);
  for (Index i = 0; i < positions; ++i)
    for (Index j = 0; j < positions; ++j) ws(i, j) = rng.uniform(-1e-3, 1e-3);
  blk.spatial_weight = &store.add(name + ".spatial_weight", ws);
  blk.spatial_bias = &store.add(name + ".spatial_bias", Matrix::Ones(positions, 1));
  blk.proj_out = Linear::create(store, name + ".proj_out", ffn / 2, d, rng);
  blk.dropout = dropout;
  return blk;
}

Tensor GmlpBlock::forward(const ForwardContext& ctx, const Tensor& z) const {
  Tape& tape = *ctx.tape;
  const Index half = proj_in.out_features() / 2;
  const Tensor u = gelu(proj_in(tape, norm_in(tape, z)));
  const Tensor u1 = slice_cols(u, 0, half);
  const Tensor u2 = norm_gate(tape, slice_cols(u, half, half));
  const Tensor gate = spatial_gating(tape.param(*spatial_weight), tape.param(*spatial_bias), u2);
  Tensor out = proj_out(tape, mul(u1, gate));
  if (dropout > 0.0 && ctx.training) out = usrf::dropout(out, dropout, true, *ctx.rng);
  return z + out;
}

ResourceEncoder::ResourceEncoder(ParameterStore& store, const std::string& name, const ResourceEncoderConfig& cfg,
                                 Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  input_ = Linear::create(store, name + ".input", cfg.resource_dim, cfg.d_model, rng);
  for (Index b = 0; b < cfg.num_blocks; ++b)
    blocks_.push_back(GmlpBlock::create(store, name + ".block" + std::to_string(b), cfg.d_model,
                                        cfg.d_model * cfg.ffn_factor, cfg.positions, cfg.dropout, rng));
  output_ = Linear::create(store, name + ".output", cfg.d_model, cfg.d_emb, rng);
}

Tensor ResourceEncoder::forward(const ForwardContext& ctx, const Tensor& r, Index batch) const {
  if (r.cols() != cfg_.resource_dim || r.rows() != batch * cfg_.positions)
    throw DimensionError("resource encoder: expected " + std::to_string(batch * cfg_.positions) + "x" +
                         std::to_string(cfg_.resource_dim) + ", got " + shape_string(r.value()));
  Tensor z = input_(*ctx.tape, r);
  for (const auto& blk : blocks_) z = blk.forward(ctx, z);
  return output_(*ctx.tape, segment_mean(z, graph_segments(batch, cfg_.positions), batch));
}

json to_json(const TrafficEncoderConfig& c) {
  return {{"num_layers", c.num_layers}, {"node_dim", c.node_dim}, {"edge_dim", c.edge_dim},
          {"d_emb", c.d_emb},           {"heads", c.heads},       {"dropout", c.dropout},
          {"reverse_messages", c.reverse_messages}};
}

json to_json(const ResourceEncoderConfig& c) {
  return {{"num_blocks", c.num_blocks}, {"resource_dim", c.resource_dim}, {"d_model", c.d_model},
          {"ffn_factor", c.ffn_factor}, {"positions", c.positions},       {"d_emb", c.d_emb},
          {"dropout", c.dropout}};
}

TrafficEncoderConfig traffic_config_from_json(const json& j) {
  TrafficEncoderConfig c;
  c.num_layers = j.value("num_layers", c.num_layers);
  c.node_dim = j.value("node_dim", c.node_dim);
  c.edge_dim = j.value("edge_dim", c.edge_dim);
  c.d_emb = j.value("d_emb", c.d_emb);
  c.heads = j.value("heads", c.heads);
  c.dropout = j.value("dropout", c.dropout);
  c.reverse_messages = j.value("reverse_messages", c.reverse_messages);
  return c;
}

ResourceEncoderConfig resource_config_from_json(const json& j) {
  ResourceEncoderConfig c;
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.resource_dim = j.value("resource_dim", c.resource_dim);
  c.d_model = j.value("d_model", c.d_model);
  c.ffn_factor = j.value("ffn_factor", c.ffn_factor);
  c.positions = j.value("positions", c.positions);
  c.d_emb = j.value("d_emb", c.d_emb);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

}  // namespace usrf
