#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "dynasty/error.hpp"
#include "dynasty/grad_check.hpp"
#include "dynasty/model.hpp"
#include "test_util.hpp"

using namespace dynasty;
using testutil::max_abs_diff;
using testutil::random_tensor;
using Vec = std::vector<double>;

namespace {

// ----- scalar-loop oracles ---------------------------------------------------

Vec affine(const Vec& x, const Linear& l) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  Vec y(l.bias.values().begin(), l.bias.values().end());
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) y[o] += x[i] * l.weight.values()[i * out + o];
  return y;
}

Vec relu_vec(Vec v) {
  for (double& x : v) x = x > 0 ? x : 0.0;
  return v;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Vec layer_norm_vec(const Vec& x, const LayerNormParams& p, double eps) {
  const double n = static_cast<double>(x.size());
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= n;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (x[i] - mean) / std::sqrt(var + eps) * p.gain.values()[i] + p.offset.values()[i];
  return y;
}

Vec bias_mlp(double a, const std::vector<Linear>& mlp) {
  Vec h{a};
  for (std::size_t k = 0; k < mlp.size(); ++k) {
    h = affine(h, mlp[k]);
    if (k + 1 < mlp.size()) h = relu_vec(h);
  }
  return h;
}

Vec row(const Tensor& t, std::size_t r) {
  const std::size_t c = t.dim(-1);
  return Vec(t.values().begin() + static_cast<std::ptrdiff_t>(r * c),
             t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
}

// Self-attention over rows of x (S rows of width d). bias(k, i, j) or null.
// Returns output rows and fills attn[k][i][j].
std::vector<Vec> attention_oracle(const std::vector<Vec>& x, const AttentionParams& p, std::size_t heads,
                                  const std::function<double(std::size_t, std::size_t, std::size_t)>& bias,
                                  std::vector<std::vector<Vec>>& attn) {
  const std::size_t S = x.size(), d = x[0].size(), dh = d / heads;
  std::vector<Vec> q, k, v;
  for (const auto& r : x) {
    q.push_back(affine(r, p.query));
    k.push_back(affine(r, p.key));
    v.push_back(affine(r, p.value));
  }
  attn.assign(heads, std::vector<Vec>(S, Vec(S)));
  std::vector<Vec> merged(S, Vec(d, 0.0));
  for (std::size_t hh = 0; hh < heads; ++hh) {
    for (std::size_t i = 0; i < S; ++i) {
      Vec s(S);
      double mx = -1e300;
      for (std::size_t j = 0; j < S; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][hh * dh + c] * k[j][hh * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh)) + (bias ? bias(hh, i, j) : 0.0);
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < S; ++j) z += (s[j] = std::exp(s[j] - mx));
      for (std::size_t j = 0; j < S; ++j) attn[hh][i][j] = s[j] / z;
      for (std::size_t j = 0; j < S; ++j)
        for (std::size_t c = 0; c < dh; ++c) merged[i][hh * dh + c] += attn[hh][i][j] * v[j][hh * dh + c];
    }
  }
  std::vector<Vec> out;
  for (const auto& r : merged) out.push_back(affine(r, p.output));
  return out;
}

Vec add_vec(const Vec& a, const Vec& b) {
  Vec c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

Vec gru_oracle(const Vec& x, const Vec& h, const GruParams& p) {
  const std::size_t d = h.size();
  Vec xp = affine(x, Linear{p.input_weight, p.input_bias});
  Vec hp = affine(h, Linear{p.hidden_weight, p.hidden_bias});
  Vec out(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double r = sigm(xp[i] + hp[i]);
    const double z = sigm(xp[d + i] + hp[d + i]);
    const double n = std::tanh(xp[2 * d + i] + r * hp[2 * d + i]);
    out[i] = (1 - z) * n + z * h[i];
  }
  return out;
}

// ----- fixtures --------------------------------------------------------------

ModelConfig tiny_config() {
  ModelConfig c;
  c.feature_dim = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_layers = 1;
  c.history_len = 4;
  c.horizon = 3;
  c.bias_mlp_hidden = 6;
  c.edge_dropout_rate = 0.0;
  return c;
}

void randomize(ModelParameters& p, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (auto& nt : p.named()) {
    for (double& v : nt.tensor.mutable_values()) v = uniform(rng, -scale, scale);
  }
}

void set_all(const Tensor& t, double v) {
  Tensor h = t;
  std::fill(h.mutable_values().begin(), h.mutable_values().end(), v);
}

GraphBatch random_batch(Rng& rng, std::size_t B, std::size_t N, std::size_t L, std::size_t D) {
  GraphBatch b;
  b.x = random_tensor(rng, {B, N, L, D}, false);
  b.adj = random_tensor(rng, {B, L, N, N}, false, 0.0, 1.0);
  return b;
}

std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_index(rng, i + 1)]);
  return p;
}

// Permutes axis `axis` (0-based, node axis) of a tensor with trailing block.
Tensor permute_nodes(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& perm) {
  const auto& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Vec v(t.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < inner; ++k) v[(o * n + i) * inner + k] = t.values()[(o * n + perm[i]) * inner + k];
  return Tensor::from(s, std::move(v));
}

GraphBatch permute_batch(const GraphBatch& b, const std::vector<std::size_t>& perm) {
  return {permute_nodes(b.x, 1, perm), permute_nodes(permute_nodes(b.adj, 2, perm), 3, perm)};
}

}  // namespace

TEST_CASE("config validation and json") {
  ModelConfig c;
  CHECK(c.hidden_dim == 48);
  CHECK(c.num_heads == 4);
  CHECK(c.num_layers == 4);
  CHECK(c.bias_mlp_hidden == 64);
  CHECK(c.bias_mlp_layers == 2);
  c.num_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.num_heads = 4;
  c.edge_dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  ModelConfig t = tiny_config();
  nlohmann::json j = t;
  ModelConfig back = j.get<ModelConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK_THROWS_AS(nlohmann::json({{"hidden_dimm", 3}}).get<ModelConfig>(), ConfigError);
}

TEST_CASE("parameter set is a function of the configuration") {
  ModelConfig c = tiny_config();
  Model a = Model::initialize(c, 1), b = Model::initialize(c, 2);
  CHECK(a.parameter_count() == b.parameter_count());
  auto na = a.named_parameters(), nb = b.named_parameters();
  REQUIRE(na.size() == nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].name == nb[i].name);
    CHECK(na[i].tensor.shape() == nb[i].tensor.shape());
    CHECK(na[i].tensor.requires_grad());
  }
  const std::size_t d = 8, D = 2, h = 2, hid = 6;
  const std::size_t expected = (D * d + d) + 4 * d + (4 * (d * d + d) + (hid + hid) + (hid * h + h) + 2 * d +
                                                       (d * 4 * d + 4 * d) + (4 * d * d + d) + 2 * d) +
                               2 * (d * 3 * d * 2 + 3 * d * 2) + (d * d + d + d * D + D);
  CHECK(a.parameter_count() == expected);
  c.tie_reconstruction_head = false;
  CHECK(Model::initialize(c, 1).parameter_count() == expected + d * d + d + d * D + D);
}

TEST_CASE("embed_inputs") {
  ModelConfig c = tiny_config();
  Rng rng(3);
  SUBCASE("zero weights give zero") {
    ModelParameters p = init_parameters(c, 1);
    set_all(p.input_projection.weight, 0);
    set_all(p.input_projection.bias, 0);
    set_all(p.positional_encoding, 0);
    Tensor z = embed_inputs(random_tensor(rng, {1, 3, 4, 2}, false), p, c);
    for (double v : z.values()) CHECK(v == 0.0);
  }
  SUBCASE("identity projection") {
    ModelConfig ci = c;
    ci.feature_dim = 8;
    ModelParameters p = init_parameters(ci, 1);
    Tensor w = p.input_projection.weight;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) w.mutable_values()[i * 8 + j] = i == j;
    set_all(p.input_projection.bias, 0);
    set_all(p.positional_encoding, 0);
    Tensor x = random_tensor(rng, {1, 3, 4, 8}, false);
    CHECK(max_abs_diff(embed_inputs(x, p, ci).values(), x.values()) == 0.0);
  }
  SUBCASE("matches matrix-multiply-plus-lookup oracle") {
    ModelConfig co = c;
    co.hidden_dim = 4;
    co.history_len = 3;
    ModelParameters p = init_parameters(co, 5);
    randomize(p, 9);
    Tensor x = random_tensor(rng, {1, 1, 3, 2}, false);
    Tensor z = embed_inputs(x, p, co);
    for (std::size_t t = 0; t < 3; ++t) {
      Vec expect = add_vec(affine(row(x, t), p.input_projection), row(p.positional_encoding, t));
      CHECK(max_abs_diff(row(z, t), expect) < 1e-12);
    }
  }
  SUBCASE("errors") {
    ModelParameters p = init_parameters(c, 1);
    CHECK_THROWS_AS(embed_inputs(random_tensor(rng, {1, 3, 4, 3}, false), p, c), DimensionError);
    CHECK_THROWS_AS(embed_inputs(random_tensor(rng, {1, 3, 5, 2}, false), p, c), DimensionError);
  }
}

TEST_CASE("edge_bias") {
  ModelConfig c = tiny_config();
  ModelParameters p = init_parameters(c, 2);
  randomize(p, 4);
  const auto& mlp = p.layers[0].edge_bias;
  Rng rng(8);
  SUBCASE("zero output layer") {
    set_all(mlp.back().weight, 0);
    set_all(mlp.back().bias, 0);
    Tensor b = edge_bias(random_tensor(rng, {4, 4}, false), mlp);
    CHECK(b.shape() == Shape{2, 4, 4});
    for (double v : b.values()) CHECK(v == 0.0);
  }
  SUBCASE("constant adjacency gives per-head constants") {
    Tensor b = edge_bias(Tensor::full({3, 3}, 0.7), mlp);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t e = 0; e < 9; ++e) CHECK(b.values()[k * 9 + e] == b.values()[k * 9]);
  }
  SUBCASE("binary adjacency matches scalar evaluation") {
    Tensor a = Tensor::from({3, 3}, {0, 1, 0, 1, 0, 1, 1, 1, 0});
    Tensor b = edge_bias(a, mlp);
    const Vec at0 = bias_mlp(0.0, mlp), at1 = bias_mlp(1.0, mlp);
    CHECK(at0 != at1);
    for (std::size_t e = 0; e < 9; ++e) {
      const Vec& ref = a.values()[e] == 1.0 ? at1 : at0;
      for (std::size_t k = 0; k < 2; ++k) CHECK(std::fabs(b.values()[k * 9 + e] - ref[k]) < 1e-15);
    }
  }
}

TEST_CASE("spatial attention layer") {
  Rng rng(21);
  ForwardContext ctx;
  SUBCASE("single node with zero bias attends to itself") {
    ModelConfig c = tiny_config();
    ModelParameters p = init_parameters(c, 3);
    randomize(p, 5);
    auto& layer = p.layers[0];
    set_all(layer.edge_bias.back().weight, 0);
    set_all(layer.edge_bias.back().bias, 0);
    AttentionTrace trace;
    ctx.trace = &trace;
    Tensor z = random_tensor(rng, {1, 8}, false);
    Tensor out = spatial_attention_layer(z, Tensor::full({1, 1}, 3.0), layer, c, ctx);
    for (double w : trace.spatial.at(0).values()) CHECK(w == 1.0);
    Tensor other = spatial_attention_layer(z, Tensor::full({1, 1}, -7.0), layer, c, ctx);
    CHECK(max_abs_diff(out.values(), other.values()) == 0.0);
    // With no graph the attended vector is V(z) projected.
    std::vector<std::vector<Vec>> attn;
    auto att = attention_oracle({row(z, 0)}, layer.attention, 2, nullptr, attn);
    Vec h = layer_norm_vec(add_vec(row(z, 0), att[0]), layer.attention_norm, c.layer_norm_eps);
    Vec ff = affine(relu_vec(affine(h, layer.ffn_expand)), layer.ffn_contract);
    CHECK(max_abs_diff(row(out, 0), layer_norm_vec(add_vec(h, ff), layer.ffn_norm, c.layer_norm_eps)) < 1e-12);
  }
  SUBCASE("affine bias MLP is shift invariant") {
    ModelConfig c = tiny_config();
    c.bias_mlp_layers = 1;
    ModelParameters p = init_parameters(c, 3);
    randomize(p, 6);
    AttentionTrace trace;
    ctx.trace = &trace;
    Tensor z = random_tensor(rng, {4, 8}, false);
    Tensor a = random_tensor(rng, {4, 4}, false);
    Tensor shifted = Tensor::from(a.shape(), Vec(a.values().begin(), a.values().end()));
    for (double& v : shifted.mutable_values()) v += 2.5;
    spatial_attention_layer(z, a, p.layers[0], c, ctx);
    spatial_attention_layer(z, shifted, p.layers[0], c, ctx);
    CHECK(max_abs_diff(trace.spatial[0].values(), trace.spatial[1].values()) < 1e-10);
  }
  SUBCASE("three nodes, one head, matches scalar oracle") {
    ModelConfig c = tiny_config();
    c.num_heads = 1;
    ModelParameters p = init_parameters(c, 3);
    randomize(p, 7);
    const auto& layer = p.layers[0];
    AttentionTrace trace;
    ctx.trace = &trace;
    Tensor z = random_tensor(rng, {3, 8}, false);
    Tensor a = random_tensor(rng, {3, 3}, false);
    Tensor out = spatial_attention_layer(z, a, layer, c, ctx);
    std::vector<Vec> rows{row(z, 0), row(z, 1), row(z, 2)};
    std::vector<std::vector<Vec>> attn;
    auto att = attention_oracle(
        rows, layer.attention, 1,
        [&](std::size_t k, std::size_t i, std::size_t j) { return bias_mlp(a.values()[i * 3 + j], layer.edge_bias)[k]; },
        attn);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(max_abs_diff(row(trace.spatial[0], i), attn[0][i]) < 1e-10);
      Vec h = layer_norm_vec(add_vec(rows[i], att[i]), layer.attention_norm, c.layer_norm_eps);
      Vec ff = affine(relu_vec(affine(h, layer.ffn_expand)), layer.ffn_contract);
      CHECK(max_abs_diff(row(out, i), layer_norm_vec(add_vec(h, ff), layer.ffn_norm, c.layer_norm_eps)) < 1e-10);
    }
  }
  SUBCASE("node count mismatch") {
    ModelConfig c = tiny_config();
    ModelParameters p = init_parameters(c, 3);
    CHECK_THROWS_AS(spatial_attention_layer(random_tensor(rng, {3, 8}, false), Tensor::zeros({4, 4}), p.layers[0], c,
                                            ctx),
                    DimensionError);
  }
  SUBCASE("edge dropout only in train mode") {
    ModelConfig c = tiny_config();
    c.edge_dropout_rate = 0.5;
    ModelParameters p = init_parameters(c, 3);
    randomize(p, 8);
    Tensor z = random_tensor(rng, {5, 8}, false);
    Tensor a = random_tensor(rng, {5, 5}, false, 0.5, 1.0);
    Tensor e1 = spatial_attention_layer(z, a, p.layers[0], c, ctx);
    Tensor e2 = spatial_attention_layer(z, a, p.layers[0], c, ctx);
    CHECK(max_abs_diff(e1.values(), e2.values()) == 0.0);
    Rng drop(1);
    ForwardContext train{true, &drop, nullptr};
    Tensor t1 = spatial_attention_layer(z, a, p.layers[0], c, train);
    CHECK(max_abs_diff(e1.values(), t1.values()) > 1e-9);
    ForwardContext no_rng{true, nullptr, nullptr};
    CHECK_THROWS_AS(spatial_attention_layer(z, a, p.layers[0], c, no_rng), ContractError);
  }
}

TEST_CASE("temporal self-attention") {
  ModelConfig c = tiny_config();
  c.temporal_attention = true;
  ModelParameters p = init_parameters(c, 11);
  randomize(p, 12);
  const auto& tp = *p.temporal;
  Rng rng(13);
  AttentionTrace trace;
  ForwardContext ctx{false, nullptr, &trace};
  SUBCASE("single step") {
    Tensor z = random_tensor(rng, {1, 3, 1, 8}, false);
    Tensor out = temporal_self_attention(z, tp, c, ctx);
    for (double w : trace.temporal[0].values()) CHECK(w == 1.0);
    for (std::size_t n = 0; n < 3; ++n) {
      std::vector<std::vector<Vec>> attn;
      auto att = attention_oracle({row(z, n)}, tp.attention, 2, nullptr, attn);
      CHECK(max_abs_diff(row(out, n), layer_norm_vec(add_vec(row(z, n), att[0]), tp.norm, c.layer_norm_eps)) < 1e-12);
    }
  }
  SUBCASE("no node mixing") {
    Tensor z = random_tensor(rng, {1, 4, 3, 8}, false);
    auto perm = random_permutation(rng, 4);
    Tensor a = permute_nodes(temporal_self_attention(z, tp, c, ctx), 1, perm);
    Tensor b = temporal_self_attention(permute_nodes(z, 1, perm), tp, c, ctx);
    CHECK(max_abs_diff(a.values(), b.values()) == 0.0);
  }
  SUBCASE("two nodes, three steps, matches scalar oracle") {
    Tensor z = random_tensor(rng, {1, 2, 3, 8}, false);
    Tensor out = temporal_self_attention(z, tp, c, ctx);
    for (std::size_t n = 0; n < 2; ++n) {
      std::vector<Vec> rows{row(z, n * 3), row(z, n * 3 + 1), row(z, n * 3 + 2)};
      std::vector<std::vector<Vec>> attn;
      auto att = attention_oracle(rows, tp.attention, 2, nullptr, attn);
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(row(trace.temporal[0], (n * 2 + k) * 3 + i), attn[k][i]) < 1e-10);
      for (std::size_t t = 0; t < 3; ++t) {
        Vec ref = layer_norm_vec(add_vec(rows[t], att[t]), tp.norm, c.layer_norm_eps);
        CHECK(max_abs_diff(row(out, n * 3 + t), ref) < 1e-10);
      }
    }
  }
}

TEST_CASE("encode") {
  Rng rng(31);
  ForwardContext ctx;
  SUBCASE("empty stack is the embedding") {
    ModelConfig c = tiny_config();
    c.num_layers = 0;
    ModelParameters p = init_parameters(c, 1);
    GraphBatch b = random_batch(rng, 2, 3, 4, 2);
    CHECK(max_abs_diff(encode(b, p, c, ctx).values(), embed_inputs(b.x, p, c).values()) == 0.0);
  }
  SUBCASE("permutation equivariance") {
    for (bool temporal : {false, true}) {
      ModelConfig c = tiny_config();
      c.temporal_attention = temporal;
      c.num_layers = 2;
      ModelParameters p = init_parameters(c, 2);
      randomize(p, 3);
      GraphBatch b = random_batch(rng, 2, 5, 4, 2);
      auto perm = random_permutation(rng, 5);
      Tensor lhs = encode(permute_batch(b, perm), p, c, ctx);
      Tensor rhs = permute_nodes(encode(b, p, c, ctx), 1, perm);
      CHECK(max_abs_diff(lhs.values(), rhs.values()) < 1e-9);
    }
  }
  SUBCASE("different graphs with tied features give different slices") {
    ModelConfig c = tiny_config();
    ModelParameters p = init_parameters(c, 2);
    randomize(p, 4);
    GraphBatch b;
    Tensor frame = random_tensor(rng, {1, 4, 1, 2}, false);
    std::vector<Tensor> frames(4, frame);
    b.x = ops::concat(frames, 2);
    set_all(p.positional_encoding, 0.0);
    Vec adj(4 * 16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) adj[0 * 16 + i * 4 + (i + 1) % 4] = 1.0;  // ring at t=0
    for (std::size_t i = 0; i < 4; ++i) adj[1 * 16 + i * 4 + i] = 1.0;            // self loops at t=1
    b.adj = Tensor::from({1, 4, 4, 4}, adj);
    Tensor z = encode(b, p, c, ctx);
    Vec s0, s1, s2;
    for (std::size_t n = 0; n < 4; ++n) {
      for (double v : row(z, n * 4 + 0)) s0.push_back(v);
      for (double v : row(z, n * 4 + 1)) s1.push_back(v);
      for (double v : row(z, n * 4 + 2)) s2.push_back(v);
    }
    CHECK(max_abs_diff(s0, s1) > 1e-6);
  }
  SUBCASE("history length mismatch between x and adj") {
    ModelConfig c = tiny_config();
    ModelParameters p = init_parameters(c, 1);
    GraphBatch b = random_batch(rng, 1, 3, 4, 2);
    b.adj = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(encode(b, p, c, ctx), DimensionError);
  }
}

TEST_CASE("summarize_history and gru") {
  ModelConfig c = tiny_config();
  Rng rng(41);
  SUBCASE("zero weights") {
    ModelParameters p = init_parameters(c, 1);
    set_all(p.encoder_gru.input_weight, 0);
    set_all(p.encoder_gru.hidden_weight, 0);
    Tensor z = random_tensor(rng, {1, 2, 4, 8}, false);
    // Constant gates from biases: h <- (1-u) n + u h with n = tanh(bn + r bhn).
    Vec ib(p.encoder_gru.input_bias.values().begin(), p.encoder_gru.input_bias.values().end());
    Vec hb(p.encoder_gru.hidden_bias.values().begin(), p.encoder_gru.hidden_bias.values().end());
    Tensor h0 = summarize_history(z, p.encoder_gru);
    for (std::size_t i = 0; i < 8; ++i) {
      const double r = sigm(ib[i] + hb[i]), u = sigm(ib[8 + i] + hb[8 + i]);
      const double n = std::tanh(ib[16 + i] + r * hb[16 + i]);
      double h = 0;
      for (int t = 0; t < 4; ++t) h = (1 - u) * n + u * h;
      CHECK(std::fabs(h0.values()[i] - h) < 1e-12);
      CHECK(std::fabs(h0.values()[8 + i] - h) < 1e-12);
    }
    set_all(p.encoder_gru.input_bias, 0);
    set_all(p.encoder_gru.hidden_bias, 0);
    Tensor zero = summarize_history(z, p.encoder_gru);
    for (double v : zero.values()) CHECK(v == 0.0);
  }
  SUBCASE("single step matches the scalar oracle") {
    ModelParameters p = init_parameters(c, 2);
    Tensor z = random_tensor(rng, {1, 3, 1, 8}, false);
    Tensor h0 = summarize_history(z, p.encoder_gru);
    for (std::size_t n = 0; n < 3; ++n)
      CHECK(max_abs_diff(row(h0, n), gru_oracle(row(z, n), Vec(8, 0.0), p.encoder_gru)) < 1e-12);
  }
  SUBCASE("identical frames iterate the same cell") {
    ModelParameters p = init_parameters(c, 3);
    Tensor frame = random_tensor(rng, {1, 1, 1, 8}, false);
    std::vector<Tensor> frames(4, frame);
    Tensor h0 = summarize_history(ops::concat(frames, 2), p.encoder_gru);
    Vec h(8, 0.0);
    for (int t = 0; t < 4; ++t) h = gru_oracle(row(frame, 0), h, p.encoder_gru);
    CHECK(max_abs_diff(row(h0, 0), h) < 1e-12);
  }
}

TEST_CASE("decode_step") {
  ModelConfig c = tiny_config();
  c.feature_dim = 1;
  c.hidden_dim = 4;
  Rng rng(51);
  SUBCASE("zero weights") {
    ModelParameters p = init_parameters(c, 1);
    for (auto& nt : p.named()) {
      if (nt.name.rfind("forecast_head.output.bias", 0) != 0) set_all(nt.tensor, 0.0);
    }
    DecodeResult r = decode_step(Tensor::zeros({1, 2, 4}), random_tensor(rng, {1, 2, 1}, false), p);
    for (double v : r.hidden.values()) CHECK(v == 0.0);
    for (double v : r.y.values()) CHECK(v == p.forecast_head.output.bias.values()[0]);
  }
  SUBCASE("pure and matches scalar oracle") {
    ModelParameters p = init_parameters(c, 2);
    randomize(p, 3);
    Tensor h = random_tensor(rng, {1, 2, 4}, false);
    Tensor x = random_tensor(rng, {1, 2, 1}, false);
    DecodeResult r1 = decode_step(h, x, p), r2 = decode_step(h, x, p);
    CHECK(max_abs_diff(r1.y.values(), r2.y.values()) == 0.0);
    CHECK(max_abs_diff(r1.hidden.values(), r2.hidden.values()) == 0.0);
    for (std::size_t n = 0; n < 2; ++n) {
      Vec hn = gru_oracle(affine(row(x, n), p.input_projection), row(h, n), p.decoder_gru);
      Vec y = affine(relu_vec(affine(hn, p.forecast_head.hidden)), p.forecast_head.output);
      CHECK(max_abs_diff(row(r1.hidden, n), hn) < 1e-12);
      CHECK(max_abs_diff(row(r1.y, n), y) < 1e-12);
    }
  }
}

TEST_CASE("forecast modes") {
  ModelConfig c = tiny_config();
  ModelParameters p = init_parameters(c, 61);
  Rng rng(62);
  GraphBatch b = random_batch(rng, 3, 4, 4, 2);
  Tensor y = random_tensor(rng, {3, 4, 3, 2}, false);
  ForwardContext ctx;
  Tensor free = forecast(b, p, c, ForecastMode::free_running(), ctx);
  CHECK(free.shape() == Shape{3, 4, 3, 2});
  Tensor forced = forecast(b, p, c, ForecastMode::teacher_forced(y), ctx);
  CHECK(max_abs_diff(free.values(), forced.values()) > 1e-9);

  SUBCASE("p = 0 is free running") {
    Rng s(5);
    Tensor out = forecast(b, p, c, ForecastMode::scheduled(y, 0.0, 0.5, s), ctx);
    CHECK(max_abs_diff(out.values(), free.values()) == 0.0);
  }
  SUBCASE("p = 1 and alpha = 1 is teacher forced") {
    Rng s(5);
    Tensor out = forecast(b, p, c, ForecastMode::scheduled(y, 1.0, 1.0, s), ctx);
    CHECK(max_abs_diff(out.values(), forced.values()) == 0.0);
  }
  SUBCASE("single step agrees across modes") {
    Rng s(5);
    Tensor f1 = forecast(b, p, c, ForecastMode::free_running(), ctx, 1);
    Tensor f2 = forecast(b, p, c, ForecastMode::teacher_forced(y), ctx, 1);
    Tensor f3 = forecast(b, p, c, ForecastMode::scheduled(y, 0.5, 0.5, s), ctx, 1);
    CHECK(max_abs_diff(f1.values(), f2.values()) == 0.0);
    CHECK(max_abs_diff(f1.values(), f3.values()) == 0.0);
  }
  SUBCASE("scheduled mixes per batch element") {
    Rng s(7);
    Tensor out = forecast(b, p, c, ForecastMode::scheduled(y, 0.5, 0.3, s), ctx);
    // each batch element is either the free rollout or differs from it
    CHECK(out.shape() == free.shape());
    Rng s2(7);
    Tensor again = forecast(b, p, c, ForecastMode::scheduled(y, 0.5, 0.3, s2), ctx);
    CHECK(max_abs_diff(out.values(), again.values()) == 0.0);
  }
  SUBCASE("first input is the last observed frame") {
    Tensor h = summarize_history(encode(b, p, c, ctx), p.encoder_gru);
    DecodeResult r = decode_step(h, ops::reshape(ops::slice(b.x, 2, 3, 1), {3, 4, 2}), p);
    Tensor first = ops::slice(free, 2, 0, 1);
    CHECK(max_abs_diff(first.values(), r.y.values()) == 0.0);
  }
  SUBCASE("targets are required") {
    ForecastMode m;
    m.kind = ForecastMode::Kind::teacher_forced;
    CHECK_THROWS_AS(forecast(b, p, c, m, ctx), ContractError);
    CHECK_THROWS_AS(forecast(b, p, c, ForecastMode::teacher_forced(Tensor::zeros({3, 4, 2, 2})), ctx),
                    DimensionError);
    Rng s(1);
    CHECK_THROWS_AS(ForecastMode::scheduled(y, 1.5, 0.5, s), ConfigError);
  }
}

TEST_CASE("reconstruct") {
  for (bool tied : {true, false}) {
    ModelConfig c = tiny_config();
    c.tie_reconstruction_head = tied;
    c.edge_dropout_rate = 0.2;
    c.feature_dropout_rate = 0.1;
    ModelParameters p = init_parameters(c, 71);
    randomize(p, 72);
    Rng rng(73);
    GraphBatch b = random_batch(rng, 2, 5, 4, 2);
    ForwardContext ctx;
    Tensor r1 = reconstruct(b, p, c, ctx), r2 = reconstruct(b, p, c, ctx);
    CHECK(r1.shape() == b.x.shape());
    CHECK(max_abs_diff(r1.values(), r2.values()) == 0.0);
    auto perm = random_permutation(rng, 5);
    Tensor lhs = reconstruct(permute_batch(b, perm), p, c, ctx);
    CHECK(max_abs_diff(lhs.values(), permute_nodes(r1, 1, perm).values()) < 1e-9);
  }
}

TEST_CASE("model invariants") {
  Rng rng(81);
  for (bool tied : {true, false}) {
    for (bool temporal : {false, true}) {
      CAPTURE(tied);
      CAPTURE(temporal);
      ModelConfig c = tiny_config();
      c.tie_reconstruction_head = tied;
      c.temporal_attention = temporal;
      c.num_layers = 2;
      Model m = Model::initialize(c, 82);
      randomize(m.params(), 83);
      GraphBatch b = random_batch(rng, 2, 5, 4, 2);
      AttentionTrace trace;
      ForwardContext ctx{false, nullptr, &trace};
      Tensor out = m.forecast(b, ForecastMode::free_running(), ctx);

      SUBCASE("forecast equivariance") {
        auto perm = random_permutation(rng, 5);
        ForwardContext plain;
        Tensor lhs = m.forecast(permute_batch(b, perm), ForecastMode::free_running(), plain);
        CHECK(max_abs_diff(lhs.values(), permute_nodes(out, 1, perm).values()) < 1e-9);
      }
      SUBCASE("attention rows are stochastic") {
        std::vector<Tensor> all = trace.spatial;
        all.insert(all.end(), trace.temporal.begin(), trace.temporal.end());
        CHECK(all.size() == (temporal ? 3u : 2u));
        for (const Tensor& a : all) {
          const std::size_t S = a.dim(-1);
          for (std::size_t r = 0; r < a.numel() / S; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < S; ++j) {
              CHECK(a.values()[r * S + j] >= 0.0);
              s += a.values()[r * S + j];
            }
            CHECK(std::fabs(s - 1.0) < 1e-10);
          }
        }
      }
      SUBCASE("graph sensitivity") {
        GraphBatch other = b;
        other.adj = random_tensor(rng, b.adj.shape(), false, 0.0, 1.0);
        ForwardContext plain;
        CHECK(max_abs_diff(m.encode(b, plain).values(), m.encode(other, plain).values()) > 1e-6);
        m.freeze_edge_bias_output();
        CHECK(max_abs_diff(m.encode(b, plain).values(), m.encode(other, plain).values()) < 1e-12);
        CHECK(m.trainable_parameters().size() + 4 == m.named_parameters().size());
      }
    }
  }
}

TEST_CASE("end-to-end gradient check") {
  for (bool tied : {true, false}) {
    CAPTURE(tied);
    ModelConfig c = tiny_config();
    c.tie_reconstruction_head = tied;
    Model m = Model::initialize(c, 91);
    Rng rng(92);
    GraphBatch b = random_batch(rng, 1, 5, 4, 2);
    Tensor y = random_tensor(rng, {1, 5, 3, 2}, false);
    auto forecast_loss = [&] {
      ForwardContext ctx;
      Tensor pred = m.forecast(b, ForecastMode::teacher_forced(y), ctx);
      return ops::mean_all(ops::square(ops::sub(pred, y)));
    };
    auto recon_loss = [&] {
      ForwardContext ctx;
      return ops::mean_all(ops::square(ops::sub(m.reconstruct(b, ctx), b.x)));
    };
    GradCheckReport f = grad_check_adaptive(forecast_loss, m.trainable_parameters(), 1e-5);
    for (const auto& pc : f.params)
      if (!pc.passed) MESSAGE(pc.name << " " << pc.max_rel_error << " a=" << pc.worst_analytic << " n=" << pc.worst_numeric);
    CHECK_MESSAGE(f.passed(), "max rel error " << f.max_rel_error());
    GradCheckReport r = grad_check_adaptive(recon_loss, m.trainable_parameters(), 1e-5);
    CHECK_MESSAGE(r.passed(), "max rel error " << r.max_rel_error());
  }
}

TEST_CASE("clone, load and checkpoint round trip") {
  ModelConfig c = tiny_config();
  c.temporal_attention = true;
  c.tie_reconstruction_head = false;
  Model m = Model::initialize(c, 101);
  m.freeze_edge_bias_output();
  Model copy = m.clone();
  set_all(copy.params().input_projection.weight, 0.0);
  CHECK(m.params().input_projection.weight.values()[0] != 0.0);
  copy.load_values_from(m);
  CHECK(copy.params().input_projection.weight.values()[0] == m.params().input_projection.weight.values()[0]);

  auto dir = std::filesystem::temp_directory_path() / "dynasty_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir, {{"note", "x"}});
  Model back = load_checkpoint(dir);
  CHECK(nlohmann::json(back.config()) == nlohmann::json(m.config()));
  auto a = m.named_parameters(), bb = back.named_parameters();
  REQUIRE(a.size() == bb.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == bb[i].name);
    CHECK(std::memcmp(a[i].tensor.values().data(), bb[i].tensor.values().data(), a[i].tensor.numel() * 8) == 0);
    CHECK(a[i].tensor.requires_grad() == bb[i].tensor.requires_grad());
  }
  std::filesystem::remove_all(dir);
}
