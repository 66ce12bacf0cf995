#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usrf/encoders.hpp"

namespace usrf {

struct HidacConfig {
  Index d_emb = 16;
  Index tokens = 4;       // embedding viewed as `tokens` rows of d_emb/tokens
  Index rank = 4;         // k
  Index out_width = 16;   // width of z_f

  void validate() const;
  bool operator==(const HidacConfig&) const = default;
};

/// Tokenized scaled dot-product cross-attention. Queries come from `q`,
/// keys and values from `kv`; no residual (the caller adds it).
struct CrossAttention {
  Linear query, key, value;  // token_dim -> token_dim
  Index tokens = 4;

  static CrossAttention create(ParameterStore& store, const std::string& name, Index d_emb, Index tokens, Rng& rng);
  /// q, kv: B x d_emb -> B x d_emb. `attention_out` receives the (B·tokens) x tokens weights.
  Tensor forward(const ForwardContext& ctx, const Tensor& q, const Tensor& kv, Matrix* attention_out = nullptr) const;
};

/// Two-layer MLP: Linear, GELU, Linear.
struct Mlp2 {
  Linear first, second;

  static Mlp2 create(ParameterStore& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng);
  Tensor forward(Tape& tape, const Tensor& x) const;
};

struct HidacOutput {
  Tensor z_t_prime, z_r_prime;
  Tensor f_t, f_r;
  Tensor z_f;
};

/// z'_t = z_t + CA(z_t, z_r); z'_r = z_r + CA(z_r, z_t);
/// z_f = MLP_o(MLP_1(z'_t) ⊙ MLP_2(z'_r)).
struct Hidac {
  HidacConfig cfg;
  CrossAttention traffic_attn;   // queries from z_t
  CrossAttention resource_attn;  // queries from z_r
  Mlp2 mlp_traffic, mlp_resource, mlp_out;

  static Hidac create(ParameterStore& store, const std::string& name, const HidacConfig& cfg, Rng& rng);
  HidacOutput forward(const ForwardContext& ctx, const Tensor& z_t, const Tensor& z_r) const;
};

enum class Variant { Full, TrafficOnly, ResourceOnly, SimpleFused, GnnFused, SingleStream };

std::string variant_name(Variant v);
/// Throws InputError for an unknown name.
Variant parse_variant(std::string_view name);
std::vector<Variant> all_variants();

struct ModelConfig {
  Variant variant = Variant::Full;
  TrafficEncoderConfig traffic;
  ResourceEncoderConfig resource;
  HidacConfig hidac;
  Index head_hidden = 16;
  /// Graph encoder over resources in the gnn_fused variant; node_dim is set
  /// from the resource width and edge_dim is 0.
  TrafficEncoderConfig resource_graph;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Defaults for the 11-service and 13-service presets.
ModelConfig default_model_config(Variant v, const Topology& topo, const FeatureSchema& schema,
                                 bool sockshop_sized = false);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ForwardOutput {
  Tensor prediction;  // B x 1, seconds, > 0
  Tensor z_t, z_r;    // absent when the variant has no such stream
  Tensor z_t_prime, z_r_prime;
  Tensor z_f;         // input to the head
};

/// Per-snapshot stream embeddings and the fused system embedding.
struct SystemEmbedding {
  double window_start = 0.0;
  Vector z_f;
  Vector z_t, z_t_prime, z_r, z_r_prime;  // empty when not produced
};

class Model {
 public:
  Model(const ModelConfig& cfg, const Topology& topo, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Inputs are taken from the tensors, so callers can differentiate w.r.t. them.
  ForwardOutput forward(const ForwardContext& ctx, const Tensor& x, const Tensor& e, const Tensor& r,
                        Index batch) const;
  ForwardOutput forward(const ForwardContext& ctx, const GraphBatch& batch) const;

  const ModelConfig& config() const { return cfg_; }
  const Topology& topology() const { return topology_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  const TrafficEncoder* traffic_encoder() const { return traffic_ ? &*traffic_ : nullptr; }
  const ResourceEncoder* resource_encoder() const { return resource_ ? &*resource_ : nullptr; }
  const TrafficEncoder* resource_graph_encoder() const { return resource_graph_ ? &*resource_graph_ : nullptr; }
  const Hidac* hidac() const { return hidac_ ? &*hidac_ : nullptr; }
  const Mlp2& head() const { return head_; }

  /// Output bias of the head, pre-softplus.
  Parameter& head_output_bias() { return *head_.second.bias; }

 private:
  ModelConfig cfg_;
  Topology topology_;
  ParameterStore store_;
  std::optional<TrafficEncoder> traffic_;
  std::optional<ResourceEncoder> resource_;
  std::optional<TrafficEncoder> resource_graph_;
  std::optional<Hidac> hidac_;
  Mlp2 head_;
};

Model build_variant(Variant v, const ModelConfig& base, const Topology& topo, std::uint64_t seed);

/// Inference on normalized snapshots, evaluated in batches of `batch_size`.
std::vector<double> predict_latency(const Model& model, std::span<const Snapshot> snaps, Index batch_size = 64);
double predict_latency(const Model& model, const Snapshot& snap);

std::vector<SystemEmbedding> export_embedding(const Model& model, std::span<const Snapshot> snaps,
                                              Index batch_size = 64);
/// CSV: window_start, z_f_0..z_f_{n-1}; values printed with 17 significant digits.
void write_embedding_csv(std::ostream& out, std::span<const SystemEmbedding> rows);
std::vector<SystemEmbedding> read_embedding_csv(std::istream& in);

}  // namespace usrf
