#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dynasty/ops.hpp"
#include "dynasty/random.hpp"
#include "dynasty/tensor.hpp"
#include "json.hpp"

namespace dynasty {

struct ModelConfig {
  std::size_t feature_dim = 1;  // D
  std::size_t hidden_dim = 48;  // d
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t history_len = 12;  // L
  std::size_t horizon = 12;      // H
  // Rows of the learned positional table; 0 means history_len.
  std::size_t max_history_len = 0;
  double edge_dropout_rate = 0.1;
  double feature_dropout_rate = 0.0;
  bool temporal_attention = false;
  std::size_t bias_mlp_hidden = 64;
  // Number of linear layers in the edge-bias MLP (ReLU between them).
  std::size_t bias_mlp_layers = 2;
  // Reconstruction reuses the forecast head when true.
  bool tie_reconstruction_head = true;
  double layer_norm_eps = 1e-5;

  std::size_t positional_rows() const { return max_history_len ? max_history_len : history_len; }
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Unknown keys are rejected with ConfigError; missing keys keep defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor offset;
};

struct AttentionParams {
  Linear query, key, value, output;
};

struct SpatialLayerParams {
  AttentionParams attention;
  std::vector<Linear> edge_bias;  // scalar -> hidden -> ... -> num_heads
  LayerNormParams attention_norm;
  Linear ffn_expand;    // d -> 4d
  Linear ffn_contract;  // 4d -> d
  LayerNormParams ffn_norm;
};

struct TemporalBlockParams {
  AttentionParams attention;
  LayerNormParams norm;
};

// Fused gate weights, columns ordered [reset | update | candidate].
struct GruParams {
  Tensor input_weight;   // [in, 3d]
  Tensor input_bias;     // [3d]
  Tensor hidden_weight;  // [d, 3d]
  Tensor hidden_bias;    // [3d]
};

struct HeadParams {
  Linear hidden;  // d -> d
  Linear output;  // d -> D
};

struct ModelParameters {
  Linear input_projection;     // D -> d, shared by embedding and decoder input
  Tensor positional_encoding;  // [rows, d]
  std::vector<SpatialLayerParams> layers;
  std::optional<TemporalBlockParams> temporal;
  GruParams encoder_gru;
  GruParams decoder_gru;
  HeadParams forecast_head;
  std::optional<HeadParams> reconstruction_head;

  // Stable, unique names; order is the checkpoint order.
  std::vector<NamedTensor> named() const;
};

// Inputs of a batch in model layout.
struct GraphBatch {
  Tensor x;    // [B, N, L, D] node features
  Tensor adj;  // [B, L, N, N] one adjacency per history step
};

// Collects attention matrices when passed through ForwardContext.
struct AttentionTrace {
  std::vector<Tensor> spatial;   // [..., h, N, N] per layer
  std::vector<Tensor> temporal;  // [..., h, L, L]
};

struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;  // required when train is true
  AttentionTrace* trace = nullptr;
};

struct ForecastMode {
  enum class Kind { free_running, teacher_forced, scheduled };
  Kind kind = Kind::free_running;
  Tensor targets;            // [B, N, H, D]
  double probability = 0.0;  // chance per step and sample of feeding the mix
  double mix_alpha = 0.5;    // weight of the ground truth in the mix
  Rng* rng = nullptr;

  static ForecastMode free_running() { return {}; }
  static ForecastMode teacher_forced(Tensor targets);
  static ForecastMode scheduled(Tensor targets, double probability, double mix_alpha, Rng& rng);
};

struct DecodeResult {
  Tensor y;       // [..., D]
  Tensor hidden;  // [..., d]
};

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed);

Tensor linear(const Tensor& x, const Linear& p);

// x: [B, N, L, D] -> [B, N, L, d]; row t gets positional_encoding[t].
Tensor embed_inputs(const Tensor& x, const ModelParameters& params, const ModelConfig& config);

// adj: [..., N, N] -> [..., h, N, N], the MLP applied to every entry.
Tensor edge_bias(const Tensor& adj, std::span<const Linear> mlp);

// Multi-head self-attention over axis -2 of x: [..., S, d]. bias, when
// given, is [..., h, S, S] and is added to the scaled logits.
Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, std::size_t heads, const Tensor* bias,
                            std::vector<Tensor>* trace);

// z: [..., N, d], adj: [..., N, N] (same leading axes).
Tensor spatial_attention_layer(const Tensor& z, const Tensor& adj, const SpatialLayerParams& p,
                               const ModelConfig& config, ForwardContext& ctx);

// z: [B, N, L, d]; attends over L within each node.
Tensor temporal_self_attention(const Tensor& z, const TemporalBlockParams& p, const ModelConfig& config,
                               ForwardContext& ctx);

// -> [B, N, L, d]
Tensor encode(const GraphBatch& batch, const ModelParameters& params, const ModelConfig& config,
              ForwardContext& ctx);

// Projected GRU input xp: [..., 3d] (already multiplied by input_weight
// plus input_bias), h: [..., d].
Tensor gru_cell(const Tensor& xp, const Tensor& h, const GruParams& p);

// z_enc: [B, N, L, d] -> final hidden state [B, N, d] from a zero start.
Tensor summarize_history(const Tensor& z_enc, const GruParams& p);

Tensor apply_head(const Tensor& h, const HeadParams& head);

// h_prev: [B, N, d], x_in: [B, N, D].
DecodeResult decode_step(const Tensor& h_prev, const Tensor& x_in, const ModelParameters& params);

// -> [B, N, steps, D]; steps = 0 means config.horizon.
Tensor forecast(const GraphBatch& batch, const ModelParameters& params, const ModelConfig& config,
                const ForecastMode& mode, ForwardContext& ctx, std::size_t steps = 0);

// -> [B, N, L, D]
Tensor reconstruct(const GraphBatch& masked, const ModelParameters& params, const ModelConfig& config,
                   ForwardContext& ctx);

// Configuration plus parameters, with a frozen set for ablations.
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, ModelParameters params);
  static Model initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ModelParameters& params() const { return params_; }
  ModelParameters& params() { return params_; }

  std::vector<NamedTensor> named_parameters() const { return params_.named(); }
  // Parameters that take gradient updates (frozen ones excluded).
  std::vector<NamedTensor> trainable_parameters() const;
  std::size_t parameter_count() const;

  // Sets every edge-bias output layer to zero and excludes it from training.
  void freeze_edge_bias_output();

  Model clone() const;
  // Copies parameter values from a model with identical configuration.
  void load_values_from(const Model& other);

  Tensor encode(const GraphBatch& batch, ForwardContext& ctx) const {
    return dynasty::encode(batch, params_, config_, ctx);
  }
  Tensor forecast(const GraphBatch& batch, const ForecastMode& mode, ForwardContext& ctx,
                  std::size_t steps = 0) const {
    return dynasty::forecast(batch, params_, config_, mode, ctx, steps);
  }
  Tensor reconstruct(const GraphBatch& masked, ForwardContext& ctx) const {
    return dynasty::reconstruct(masked, params_, config_, ctx);
  }

 private:
  ModelConfig config_;
  ModelParameters params_;
};

// Checkpoint: a tensor bundle whose metadata holds the model configuration.
void save_checkpoint(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});
// extra, when given, receives the metadata passed to save_checkpoint.
Model load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

}  // namespace dynasty
