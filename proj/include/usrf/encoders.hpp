#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usrf/ops.hpp"
#include "usrf/rng.hpp"
#include "usrf/statgraph.hpp"

namespace usrf {

/// Per-forward settings shared by every module.
struct ForwardContext {
  Tape* tape = nullptr;
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

/// Affine map x·W + b with Glorot-uniform W and zero b.
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
                       bool with_bias = true);
  Tensor operator()(Tape& tape, const Tensor& x) const;
  Index in_features() const { return weight->value.rows(); }
  Index out_features() const { return weight->value.cols(); }
};

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNormParams create(ParameterStore& store, const std::string& name, Index width);
  Tensor operator()(Tape& tape, const Tensor& x) const;
};

Matrix glorot_uniform(Index in, Index out, Rng& rng);

/// A batch of B snapshots as one disjoint-union graph: node rows are stacked
/// snapshot-major (row b·|V| + v), edge rows likewise.
struct GraphBatch {
  Index batch = 0;
  Index num_services = 0;
  Index num_edges = 0;
  Matrix node_features;      // B|V| x d_n
  Matrix edge_features;      // B|E| x d_e
  Matrix resource_features;  // B|V| x d_r
  std::vector<double> window_starts;
  std::vector<double> labels;  // empty when any snapshot is unlabeled
};

GraphBatch make_batch(std::span<const Snapshot* const> snaps, const Topology& topo);
GraphBatch make_batch(std::span<const Snapshot> snaps, const Topology& topo);

/// Attention edges of a batched graph for one message direction. Real edges
/// come first in batch order, followed by one self edge for every node that
/// has no incoming real edge.
struct MessageGraph {
  IndexList source;  // sender node row per attention edge
  IndexList target;  // receiver node row per attention edge
  Index num_nodes = 0;
  Index num_real = 0;
  Index num_self = 0;
};

/// reverse = false: messages flow caller -> callee.
MessageGraph make_message_graph(const Topology& topo, Index batch, bool reverse);

struct TrafficEncoderConfig {
  Index num_layers = 4;
  Index node_dim = 3;
  Index edge_dim = 3;  // 0 disables the edge terms
  Index d_emb = 16;
  Index heads = 4;
  double dropout = 0.1;
  bool reverse_messages = false;

  void validate() const;
  bool operator==(const TrafficEncoderConfig&) const = default;
};

/// One transformer-convolution layer with edge features.
struct GraphTransformerLayer {
  Linear query, key, value;
  Linear edge_key, edge_value;  // unused when edge_dim == 0
  Parameter* self_key = nullptr;    // learned edge term on self edges, 1 x d
  Parameter* self_value = nullptr;
  LayerNormParams norm;
  Index heads = 4;
  Index edge_dim = 0;
  double dropout = 0.0;

  static GraphTransformerLayer create(ParameterStore& store, const std::string& name, Index d, Index edge_dim,
                                      Index heads, double dropout, Rng& rng);

  /// h: num_nodes x d; edges: num_real x edge_dim (ignored when edge_dim == 0).
  /// When `attention_out` is set it receives the num_attention_edges x heads weights.
  Tensor forward(const ForwardContext& ctx, const Tensor& h, const Tensor& edges, const MessageGraph& g,
                 Matrix* attention_out = nullptr) const;
};

/// s_i = w2ᵀ tanh(W1 h_i + b1); a = softmax over each graph's nodes; z = Σ a_i h_i.
struct AttentionPool {
  Linear score_hidden;  // d -> d
  Linear score_out;     // d -> 1, no bias

  static AttentionPool create(ParameterStore& store, const std::string& name, Index d, Rng& rng);
  /// h: (B·n) x d -> B x d
  Tensor forward(const ForwardContext& ctx, const Tensor& h, Index batch, Matrix* weights_out = nullptr) const;
};

class TrafficEncoder {
 public:
  TrafficEncoder() = default;
  TrafficEncoder(ParameterStore& store, const std::string& name, const TrafficEncoderConfig& cfg,
                 const Topology& topo, Rng& rng);

  /// x: B|V| x node_dim, e: B|E| x edge_dim -> B x d_emb
  Tensor forward(const ForwardContext& ctx, const Tensor& x, const Tensor& e, Index batch) const;

  const TrafficEncoderConfig& config() const { return cfg_; }
  const std::vector<GraphTransformerLayer>& layers() const { return layers_; }
  const AttentionPool& pool() const { return pool_; }
  const MessageGraph& message_graph(Index batch) const;

 private:
  TrafficEncoderConfig cfg_;
  Topology topology_;
  Linear input_;
  std::vector<GraphTransformerLayer> layers_;
  AttentionPool pool_;
  mutable std::vector<MessageGraph> graph_cache_;  // indexed by batch size
};

struct ResourceEncoderConfig {
  Index num_blocks = 4;
  Index resource_dim = 5;
  Index d_model = 16;
  Index ffn_factor = 4;
  Index positions = 11;  // |V|
  Index d_emb = 16;
  double dropout = 0.1;

  void validate() const;
  bool operator==(const ResourceEncoderConfig&) const = default;
};

/// gMLP block: U = GELU(LN(Z)·W_in) split [U1 | U2]; gate = W_s·LN(U2) + b_s
/// across positions; out = Z + (U1 ⊙ gate)·W_out.
struct GmlpBlock {
  LayerNormParams norm_in;
  Linear proj_in;   // d -> ffn
  LayerNormParams norm_gate;
  Parameter* spatial_weight = nullptr;  // positions x positions, init ~0
  Parameter* spatial_bias = nullptr;    // positions x 1, init 1
  Linear proj_out;  // ffn/2 -> d
  double dropout = 0.0;

  static GmlpBlock create(ParameterStore& store, const std::string& name, Index d, Index ffn, Index positions,
                          double dropout, Rng& rng);
  /// z: (B·positions) x d
  Tensor forward(const ForwardContext& ctx, const Tensor& z) const;
};

class ResourceEncoder {
 public:
  ResourceEncoder() = default;
  ResourceEncoder(ParameterStore& store, const std::string& name, const ResourceEncoderConfig& cfg, Rng& rng);

  /// r: B|V| x resource_dim -> B x d_emb
  Tensor forward(const ForwardContext& ctx, const Tensor& r, Index batch) const;

  const ResourceEncoderConfig& config() const { return cfg_; }
  const std::vector<GmlpBlock>& blocks() const { return blocks_; }

 private:
  ResourceEncoderConfig cfg_;
  Linear input_;
  std::vector<GmlpBlock> blocks_;
  Linear output_;
};

nlohmann::json to_json(const TrafficEncoderConfig& c);
nlohmann::json to_json(const ResourceEncoderConfig& c);
TrafficEncoderConfig traffic_config_from_json(const nlohmann::json& j);
ResourceEncoderConfig resource_config_from_json(const nlohmann::json& j);

}  // namespace usrf
