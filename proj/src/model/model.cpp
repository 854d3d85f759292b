#include "dynasty/model.hpp"

#include <cmath>
#include <numeric>

#include "dynasty/error.hpp"
#include "dynasty/random.hpp"

namespace dynasty {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(feature_dim > 0, "feature_dim must be positive");
  require(hidden_dim > 0, "hidden_dim must be positive");
  require(num_heads > 0, "num_heads must be positive");
  require(hidden_dim % num_heads == 0, "hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                                           std::to_string(num_heads));
  require(history_len > 0, "history_len must be positive");
  require(horizon > 0, "horizon must be positive");
  require(positional_rows() >= history_len, "max_history_len must be at least history_len");
  require(edge_dropout_rate >= 0.0 && edge_dropout_rate < 1.0, "edge_dropout_rate must lie in [0, 1)");
  require(feature_dropout_rate >= 0.0 && feature_dropout_rate < 1.0, "feature_dropout_rate must lie in [0, 1)");
  require(bias_mlp_hidden > 0, "bias_mlp_hidden must be positive");
  require(bias_mlp_layers > 0, "bias_mlp_layers must be positive");
  require(layer_norm_eps > 0.0, "layer_norm_eps must be positive");
}

namespace {

template <class P, class F>
void visit_linear(P& l, const std::string& prefix, F& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

template <class P, class F>
void visit_attention(P& a, const std::string& prefix, F& f) {
  visit_linear(a.query, prefix + ".query", f);
  visit_linear(a.key, prefix + ".key", f);
  visit_linear(a.value, prefix + ".value", f);
  visit_linear(a.output, prefix + ".output", f);
}

template <class P, class F>
void visit_norm(P& n, const std::string& prefix, F& f) {
  f(prefix + ".gain", n.gain);
  f(prefix + ".offset", n.offset);
}

template <class P, class F>
void visit_gru(P& g, const std::string& prefix, F& f) {
  f(prefix + ".input_weight", g.input_weight);
  f(prefix + ".input_bias", g.input_bias);
  f(prefix + ".hidden_weight", g.hidden_weight);
  f(prefix + ".hidden_bias", g.hidden_bias);
}

template <class P, class F>
void visit_head(P& h, const std::string& prefix, F& f) {
  visit_linear(h.hidden, prefix + ".hidden", f);
  visit_linear(h.output, prefix + ".output", f);
}

// Visits every tensor with its checkpoint name; P is ModelParameters or
// const ModelParameters.
template <class P, class F>
void visit(P& p, F&& f) {
  visit_linear(p.input_projection, "input_projection", f);
  f(std::string("positional_encoding"), p.positional_encoding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& layer = p.layers[i];
    const std::string prefix = "layers." + std::to_string(i);
    visit_attention(layer.attention, prefix + ".attention", f);
    for (std::size_t k = 0; k < layer.edge_bias.size(); ++k)
      visit_linear(layer.edge_bias[k], prefix + ".edge_bias." + std::to_string(k), f);
    visit_norm(layer.attention_norm, prefix + ".attention_norm", f);
    visit_linear(layer.ffn_expand, prefix + ".ffn_expand", f);
    visit_linear(layer.ffn_contract, prefix + ".ffn_contract", f);
    visit_norm(layer.ffn_norm, prefix + ".ffn_norm", f);
  }
  if (p.temporal) {
    visit_attention(p.temporal->attention, "temporal.attention", f);
    visit_norm(p.temporal->norm, "temporal.norm", f);
  }
  visit_gru(p.encoder_gru, "encoder_gru", f);
  visit_gru(p.decoder_gru, "decoder_gru", f);
  visit_head(p.forecast_head, "forecast_head", f);
  if (p.reconstruction_head) visit_head(*p.reconstruction_head, "reconstruction_head", f);
}

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform(rng, -bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear make_linear(Rng& rng, std::size_t in, std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = uniform_tensor(rng, {in, out}, bound);
  l.bias = uniform_tensor(rng, {out}, bound);
  return l;
}

LayerNormParams make_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionParams make_attention(Rng& rng, std::size_t d) {
  AttentionParams a;
  a.query = make_linear(rng, d, d);
  a.key = make_linear(rng, d, d);
  a.value = make_linear(rng, d, d);
  a.output = make_linear(rng, d, d);
  return a;
}

GruParams make_gru(Rng& rng, std::size_t in, std::size_t d) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  GruParams g;
  g.input_weight = uniform_tensor(rng, {in, 3 * d}, bound);
  g.input_bias = uniform_tensor(rng, {3 * d}, bound);
  g.hidden_weight = uniform_tensor(rng, {d, 3 * d}, bound);
  g.hidden_bias = uniform_tensor(rng, {3 * d}, bound);
  return g;
}

HeadParams make_head(Rng& rng, std::size_t d, std::size_t out) {
  return {make_linear(rng, d, d), make_linear(rng, d, out)};
}

Shape replace_tail(const Shape& shape, std::size_t drop, std::initializer_list<std::size_t> tail) {
  Shape out(shape.begin(), shape.end() - static_cast<std::ptrdiff_t>(drop));
  out.insert(out.end(), tail);
  return out;
}

// Order that swaps axes -3 and -2 of a rank-r tensor.
std::vector<std::size_t> swap_order(std::size_t rank, std::size_t i, std::size_t j) {
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[i], order[j]);
  return order;
}

void check_batch(const GraphBatch& batch, const ModelConfig& config) {
  const Tensor& x = batch.x;
  const Tensor& a = batch.adj;
  if (x.rank() != 4 || a.rank() != 4) {
    throw DimensionError("encode: expected x [B,N,L,D] and adj [B,L,N,N], got " + shape_to_string(x.shape()) +
                         " and " + shape_to_string(a.shape()));
  }
  if (x.dim(3) != config.feature_dim) {
    throw DimensionError("encode: feature dimension " + std::to_string(x.dim(3)) + " does not match configured " +
                         std::to_string(config.feature_dim));
  }
  if (a.dim(0) != x.dim(0) || a.dim(1) != x.dim(2) || a.dim(2) != x.dim(1) || a.dim(3) != x.dim(1)) {
    throw DimensionError("encode: adjacency " + shape_to_string(a.shape()) + " does not conform to features " +
                         shape_to_string(x.shape()) + " (batch, history length or node count differ)");
  }
}

Tensor drop_edges(const Tensor& adj, double rate, Rng& rng) {
  std::vector<double> v(adj.values().begin(), adj.values().end());
  for (double& a : v) {
    if (bernoulli(rng, rate)) a = 0.0;
  }
  return Tensor::from(adj.shape(), std::move(v));
}

Tensor last_frame(const Tensor& x) {
  // [B, N, L, D] -> [B, N, D]
  const std::size_t L = x.dim(2);
  Tensor s = ops::slice(x, 2, L - 1, 1);
  return ops::reshape(s, {x.dim(0), x.dim(1), x.dim(3)});
}

Tensor step_of(const Tensor& seq, std::size_t t) {
  // [B, N, T, C] -> [B, N, C]
  Tensor s = ops::slice(seq, 2, t, 1);
  return ops::reshape(s, {seq.dim(0), seq.dim(1), seq.dim(3)});
}

}  // namespace

std::vector<NamedTensor> ModelParameters::named() const {
  std::vector<NamedTensor> out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

ForecastMode ForecastMode::teacher_forced(Tensor targets) {
  ForecastMode m;
  m.kind = Kind::teacher_forced;
  m.targets = std::move(targets);
  return m;
}

ForecastMode ForecastMode::scheduled(Tensor targets, double probability, double mix_alpha, Rng& rng) {
  if (!(probability >= 0.0 && probability <= 1.0) || !(mix_alpha >= 0.0 && mix_alpha <= 1.0)) {
    throw ConfigError("scheduled sampling probability and mix weight must lie in [0, 1]");
  }
  ForecastMode m;
  m.kind = Kind::scheduled;
  m.targets = std::move(targets);
  m.probability = probability;
  m.mix_alpha = mix_alpha;
  m.rng = &rng;
  return m;
}

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.hidden_dim;
  const std::size_t D = config.feature_dim;
  ModelParameters p;
  p.input_projection = make_linear(rng, D, d);
  {
    std::vector<double> pe(config.positional_rows() * d);
    for (double& v : pe) v = 0.02 * standard_normal(rng);
    p.positional_encoding = Tensor::from({config.positional_rows(), d}, std::move(pe), true);
  }
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    SpatialLayerParams layer;
    layer.attention = make_attention(rng, d);
    std::size_t in = 1;
    for (std::size_t k = 0; k < config.bias_mlp_layers; ++k) {
      const bool last = k + 1 == config.bias_mlp_layers;
      const std::size_t out = last ? config.num_heads : config.bias_mlp_hidden;
      layer.edge_bias.push_back(make_linear(rng, in, out));
      in = out;
    }
    layer.attention_norm = make_norm(d);
    layer.ffn_expand = make_linear(rng, d, 4 * d);
    layer.ffn_contract = make_linear(rng, 4 * d, d);
    layer.ffn_norm = make_norm(d);
    p.layers.push_back(std::move(layer));
  }
  if (config.temporal_attention) {
    p.temporal = TemporalBlockParams{make_attention(rng, d), make_norm(d)};
  }
  p.encoder_gru = make_gru(rng, d, d);
  p.decoder_gru = make_gru(rng, d, d);
  p.forecast_head = make_head(rng, d, D);
  if (!config.tie_reconstruction_head) p.reconstruction_head = make_head(rng, d, D);
  return p;
}

Tensor linear(const Tensor& x, const Linear& p) { return ops::add(ops::matmul(x, p.weight), p.bias); }

Tensor embed_inputs(const Tensor& x, const ModelParameters& params, const ModelConfig& config) {
  if (x.rank() != 4 || x.dim(3) != config.feature_dim) {
    throw DimensionError("embed_inputs: expected [B,N,L," + std::to_string(config.feature_dim) + "], got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t L = x.dim(2);
  if (L > config.positional_rows()) {
    throw DimensionError("embed_inputs: history length " + std::to_string(L) + " exceeds positional table of " +
                         std::to_string(config.positional_rows()) + " rows");
  }
  Tensor pe = L == params.positional_encoding.dim(0) ? params.positional_encoding
                                                     : ops::slice(params.positional_encoding, 0, 0, L);
  return ops::add(linear(x, params.input_projection), pe);
}

Tensor edge_bias(const Tensor& adj, std::span<const Linear> mlp) {
  if (adj.rank() < 2 || adj.dim(-1) != adj.dim(-2)) {
    throw DimensionError("edge_bias: adjacency must be square, got " + shape_to_string(adj.shape()));
  }
  Shape col = adj.shape();
  col.push_back(1);
  Tensor h = ops::reshape(adj, col);
  for (std::size_t k = 0; k < mlp.size(); ++k) {
    h = linear(h, mlp[k]);
    if (k + 1 < mlp.size()) h = ops::relu(h);
  }
  // [..., N, N, h] -> [..., h, N, N]
  const std::size_t r = h.rank();
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  order[r - 3] = r - 1;
  order[r - 2] = r - 3;
  order[r - 1] = r - 2;
  return ops::permute(h, order);
}

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, std::size_t heads, const Tensor* bias,
                            std::vector<Tensor>* trace) {
  const std::size_t S = x.dim(-2);
  const std::size_t d = x.dim(-1);
  const std::size_t dh = d / heads;
  const Shape split = replace_tail(x.shape(), 1, {heads, dh});  // [..., S, h, dh]
  const std::size_t r = split.size();
  const auto order = swap_order(r, r - 3, r - 2);  // <-> [..., h, S, dh]

  auto heads_of = [&](const Linear& l) { return ops::permute(ops::reshape(linear(x, l), split), order); };
  Tensor q = heads_of(p.query);
  Tensor k = heads_of(p.key);
  Tensor v = heads_of(p.value);

  Tensor scores = ops::scale(ops::matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (bias) scores = ops::add(scores, *bias);
  Tensor attn = ops::softmax(scores, -1);
  if (trace) trace->push_back(attn);
  Tensor ctx = ops::matmul(attn, v);  // [..., h, S, dh]
  Tensor merged = ops::reshape(ops::permute(ctx, order), replace_tail(x.shape(), 2, {S, d}));
  return linear(merged, p.output);
}

Tensor spatial_attention_layer(const Tensor& z, const Tensor& adj, const SpatialLayerParams& p,
                               const ModelConfig& config, ForwardContext& ctx) {
  if (z.rank() < 2 || adj.rank() != z.rank() || adj.dim(-1) != z.dim(-2) || adj.dim(-2) != z.dim(-2)) {
    throw DimensionError("spatial_attention_layer: node count of features " + shape_to_string(z.shape()) +
                         " does not match adjacency " + shape_to_string(adj.shape()));
  }
  Tensor a = adj;
  if (ctx.train && config.edge_dropout_rate > 0.0) {
    if (!ctx.rng) throw ContractError("edge dropout needs an rng in train mode");
    a = drop_edges(adj, config.edge_dropout_rate, *ctx.rng);
  }
  Tensor bias = edge_bias(a, p.edge_bias);
  Tensor attended = multi_head_attention(z, p.attention, config.num_heads, &bias,
                                         ctx.trace ? &ctx.trace->spatial : nullptr);
  Tensor h = ops::layer_norm(ops::add(z, attended), p.attention_norm.gain, p.attention_norm.offset,
                             config.layer_norm_eps);
  Tensor ff = linear(ops::relu(linear(h, p.ffn_expand)), p.ffn_contract);
  return ops::layer_norm(ops::add(h, ff), p.ffn_norm.gain, p.ffn_norm.offset, config.layer_norm_eps);
}

Tensor temporal_self_attention(const Tensor& z, const TemporalBlockParams& p, const ModelConfig& config,
                               ForwardContext& ctx) {
  Tensor attended =
      multi_head_attention(z, p.attention, config.num_heads, nullptr, ctx.trace ? &ctx.trace->temporal : nullptr);
  return ops::layer_norm(ops::add(z, attended), p.norm.gain, p.norm.offset, config.layer_norm_eps);
}

Tensor encode(const GraphBatch& batch, const ModelParameters& params, const ModelConfig& config,
              ForwardContext& ctx) {
  check_batch(batch, config);
  Tensor z = embed_inputs(batch.x, params, config);
  if (ctx.train && config.feature_dropout_rate > 0.0) {
    if (!ctx.rng) throw ContractError("feature dropout needs an rng in train mode");
    z = ops::dropout(z, config.feature_dropout_rate, *ctx.rng, true);
  }
  if (!params.layers.empty()) {
    Tensor zs = ops::transpose(z, 1, 2);  // [B, L, N, d]
    for (const auto& layer : params.layers) zs = spatial_attention_layer(zs, batch.adj, layer, config, ctx);
    z = ops::transpose(zs, 1, 2);
  }
  if (config.temporal_attention) {
    if (!params.temporal) throw ContractError("temporal attention enabled but its parameters are missing");
    z = temporal_self_attention(z, *params.temporal, config, ctx);
  }
  return z;
}

Tensor gru_cell(const Tensor& xp, const Tensor& h, const GruParams& p) {
  const std::size_t d = h.dim(-1);
  Tensor hp = linear(h, Linear{p.hidden_weight, p.hidden_bias});
  Tensor reset = ops::sigmoid(ops::add(ops::slice(xp, -1, 0, d), ops::slice(hp, -1, 0, d)));
  Tensor update = ops::sigmoid(ops::add(ops::slice(xp, -1, d, d), ops::slice(hp, -1, d, d)));
  Tensor candidate = ops::tanh(ops::add(ops::slice(xp, -1, 2 * d, d), ops::mul(reset, ops::slice(hp, -1, 2 * d, d))));
  // (1 - z) * n + z * h
  return ops::add(candidate, ops::mul(update, ops::sub(h, candidate)));
}

Tensor summarize_history(const Tensor& z_enc, const GruParams& p) {
  const std::size_t B = z_enc.dim(0);
  const std::size_t N = z_enc.dim(1);
  const std::size_t L = z_enc.dim(2);
  const std::size_t d = p.hidden_weight.dim(0);
  Tensor xp = linear(z_enc, Linear{p.input_weight, p.input_bias});  // [B, N, L, 3d]
  Tensor h = Tensor::zeros({B, N, d});
  for (std::size_t t = 0; t < L; ++t) h = gru_cell(step_of(xp, t), h, p);
  return h;
}

Tensor apply_head(const Tensor& h, const HeadParams& head) {
  return linear(ops::relu(linear(h, head.hidden)), head.output);
}

DecodeResult decode_step(const Tensor& h_prev, const Tensor& x_in, const ModelParameters& params) {
  Tensor projected = linear(x_in, params.input_projection);
  Tensor xp = linear(projected, Linear{params.decoder_gru.input_weight, params.decoder_gru.input_bias});
  Tensor h = gru_cell(xp, h_prev, params.decoder_gru);
  return {apply_head(h, params.forecast_head), h};
}

Tensor forecast(const GraphBatch& batch, const ModelParameters& params, const ModelConfig& config,
                const ForecastMode& mode, ForwardContext& ctx, std::size_t steps) {
  const std::size_t H = steps ? steps : config.horizon;
  const std::size_t B = batch.x.dim(0);
  const std::size_t N = batch.x.dim(1);
  const std::size_t D = config.feature_dim;
  const bool uses_targets = mode.kind != ForecastMode::Kind::free_running;
  if (uses_targets) {
    const Tensor& y = mode.targets;
    if (!y.defined()) throw ContractError("teacher-forced or scheduled forecasting requires targets");
    if (y.rank() != 4 || y.dim(0) != B || y.dim(1) != N || y.dim(2) < H || y.dim(3) != D) {
      throw DimensionError("forecast: targets " + (y.defined() ? shape_to_string(y.shape()) : std::string()) +
                           " do not cover [" + std::to_string(B) + "," + std::to_string(N) + "," +
                           std::to_string(H) + "," + std::to_string(D) + "]");
    }
    if (mode.kind == ForecastMode::Kind::scheduled && !mode.rng) {
      throw ContractError("scheduled sampling requires an rng");
    }
  }

  Tensor h = summarize_history(encode(batch, params, config, ctx), params.encoder_gru);
  Tensor input = last_frame(batch.x);
  std::vector<Tensor> outputs;
  outputs.reserve(H);
  for (std::size_t t = 0; t < H; ++t) {
    if (t > 0) {
      const Tensor& previous = outputs.back();
      switch (mode.kind) {
        case ForecastMode::Kind::free_running:
          input = previous;
          break;
        case ForecastMode::Kind::teacher_forced:
          input = step_of(mode.targets, t - 1);
          break;
        case ForecastMode::Kind::scheduled: {
          // One coin per sample: feed alpha*truth + (1-alpha)*prediction with
          // the given probability, else the prediction alone.
          std::vector<double> pick(B * N * D, 0.0);
          std::size_t picked = 0;
          for (std::size_t b = 0; b < B; ++b) {
            bool on = mode.probability >= 1.0 ? true
                      : mode.probability <= 0.0 ? false
                                                : bernoulli(*mode.rng, mode.probability);
            if (on) {
              ++picked;
              std::fill_n(pick.begin() + static_cast<std::ptrdiff_t>(b * N * D), N * D, 1.0);
            }
          }
          if (picked == 0) {
            input = previous;
            break;
          }
          Tensor mix = ops::add(ops::scale(step_of(mode.targets, t - 1), mode.mix_alpha),
                                ops::scale(previous, 1.0 - mode.mix_alpha));
          if (picked == B) {
            input = mix;
            break;
          }
          Tensor keep = Tensor::from({B, N, D}, pick);
          for (double& v : pick) v = 1.0 - v;
          Tensor skip = Tensor::from({B, N, D}, std::move(pick));
          input = ops::add(ops::mul(keep, mix), ops::mul(skip, previous));
          break;
        }
      }
    }
    DecodeResult r = decode_step(h, input, params);
    h = r.hidden;
    outputs.push_back(r.y);
  }
  std::vector<Tensor> framed;
  framed.reserve(H);
  for (const auto& y : outputs) framed.push_back(ops::reshape(y, {B, N, 1, D}));
  return ops::concat(framed, 2);
}

Tensor reconstruct(const GraphBatch& masked, const ModelParameters& params, const ModelConfig& config,
                   ForwardContext& ctx) {
  Tensor z = encode(masked, params, config, ctx);
  const HeadParams& head = params.reconstruction_head ? *params.reconstruction_head : params.forecast_head;
  return apply_head(z, head);
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, ModelParameters params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
  return Model(config, init_parameters(config, seed));
}

std::vector<NamedTensor> Model::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& nt : params_.named()) {
    if (nt.tensor.requires_grad()) out.push_back(nt);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : params_.named()) n += nt.tensor.numel();
  return n;
}

void Model::freeze_edge_bias_output() {
  for (auto& layer : params_.layers) {
    Linear& out = layer.edge_bias.back();
    for (Tensor* t : {&out.weight, &out.bias}) {
      std::fill(t->mutable_values().begin(), t->mutable_values().end(), 0.0);
      t->set_requires_grad(false);
      t->clear_grad();
    }
  }
}

Model Model::clone() const {
  Model copy = *this;
  visit(copy.params_, [](const std::string&, Tensor& t) { t = t.clone(); });
  return copy;
}

void Model::load_values_from(const Model& other) {
  auto dst = params_.named();
  auto src = other.params_.named();
  if (dst.size() != src.size()) throw ContractError("load_values_from: parameter sets differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw ContractError("load_values_from: parameter '" + dst[i].name + "' does not match '" + src[i].name + "'");
    }
    auto out = dst[i].tensor.mutable_values();
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), out.begin());
  }
}

}  // namespace dynasty
