#include "dynasty/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "dynasty/error.hpp"

namespace dynasty {

void TrainConfig::validate(std::size_t horizon) const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("train config: " + msg);
  };
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(lambda_var >= 0.0, "lambda_var must be >= 0");
  require(horizon_decay > 0.0 && horizon_decay <= 1.0, "horizon_decay must lie in (0, 1]");
  require(mask_prob >= 0.0 && mask_prob <= 1.0, "mask_prob must lie in [0, 1]");
  require(epsilon >= 0.0, "epsilon must be >= 0");
  require(sampling_decay_epochs > 0, "sampling_decay_epochs must be positive");
  require(mix_alpha >= 0.0 && mix_alpha <= 1.0, "mix_alpha must lie in [0, 1]");
  require(curriculum_start_horizon >= 1, "curriculum_start_horizon must be at least 1");
  require(curriculum_start_horizon <= horizon, "curriculum_start_horizon " + std::to_string(curriculum_start_horizon) +
                                                   " exceeds the horizon " + std::to_string(horizon));
  require(curriculum_step_epochs > 0, "curriculum_step_epochs must be positive");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"max_epochs", c.max_epochs},
       {"pretrain_epochs", c.pretrain_epochs},
       {"batch_size", c.batch_size},
       {"lambda_var", c.lambda_var},
       {"horizon_decay", c.horizon_decay},
       {"mask_prob", c.mask_prob},
       {"epsilon", c.epsilon},
       {"sampling_decay_epochs", c.sampling_decay_epochs},
       {"mix_alpha", c.mix_alpha},
       {"curriculum_start_horizon", c.curriculum_start_horizon},
       {"curriculum_step_epochs", c.curriculum_step_epochs},
       {"early_stop_patience", c.early_stop_patience},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  nlohmann::json defaults = c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown train config key '" + it.key() + "'");
  }
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("learning_rate", c.learning_rate);
    read("max_epochs", c.max_epochs);
    read("pretrain_epochs", c.pretrain_epochs);
    read("batch_size", c.batch_size);
    read("lambda_var", c.lambda_var);
    read("horizon_decay", c.horizon_decay);
    read("mask_prob", c.mask_prob);
    read("epsilon", c.epsilon);
    read("sampling_decay_epochs", c.sampling_decay_epochs);
    read("mix_alpha", c.mix_alpha);
    read("curriculum_start_horizon", c.curriculum_start_horizon);
    read("curriculum_step_epochs", c.curriculum_step_epochs);
    read("early_stop_patience", c.early_stop_patience);
    read("grad_clip", c.grad_clip);
    read("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

// ---- losses -----------------------------------------------------------------

namespace {

void check_pair(const char* what, const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape() || pred.rank() < 2) {
    throw DimensionError(std::string(what) + ": prediction " + shape_to_string(pred.shape()) + " and target " +
                         shape_to_string(truth.shape()) + " must have equal shapes [..., H, D]");
  }
}

}  // namespace

std::vector<double> horizon_weights(std::size_t steps, double gamma) {
  std::vector<double> w(steps);
  double power = 1.0, total = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    w[t] = power;
    total += power;
    power *= gamma;
  }
  for (double& v : w) v /= total;
  return w;
}

Tensor horizon_weighted_mae(const Tensor& pred, const Tensor& truth, double gamma) {
  check_pair("horizon_weighted_mae", pred, truth);
  const std::size_t H = pred.dim(-2), D = pred.dim(-1);
  const std::vector<double> w = horizon_weights(H, gamma);
  std::vector<double> grid(H * D);
  for (std::size_t t = 0; t < H; ++t) std::fill_n(grid.begin() + static_cast<std::ptrdiff_t>(t * D), D, w[t]);
  const double per_step = static_cast<double>(pred.numel() / H);
  Tensor weighted = ops::mul(ops::abs(ops::sub(pred, truth)), Tensor::from({H, D}, std::move(grid)));
  return ops::scale(ops::sum_all(weighted), 1.0 / per_step);
}

Tensor variation_loss(const Tensor& pred, const Tensor& truth) {
  check_pair("variation_loss", pred, truth);
  const std::size_t H = pred.dim(-2);
  if (H < 2) return Tensor::scalar(0.0);
  auto diff = [H](const Tensor& y) { return ops::sub(ops::slice(y, -2, 1, H - 1), ops::slice(y, -2, 0, H - 1)); };
  const double per_step = static_cast<double>(pred.numel() / H);
  return ops::scale(ops::sum_all(ops::abs(ops::sub(diff(pred), diff(truth)))), 1.0 / per_step);
}

Tensor total_loss(const Tensor& pred, const Tensor& truth, double lambda, double gamma) {
  Tensor mae = horizon_weighted_mae(pred, truth, gamma);
  if (lambda == 0.0) return mae;
  return ops::add(mae, ops::scale(variation_loss(pred, truth), lambda));
}

NdArray sample_mask(const Shape& shape, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mask probability must lie in [0, 1]");
  NdArray mask(shape);
  for (int attempt = 0; attempt < 2; ++attempt) {
    bool any = false;
    for (double& v : mask.values) {
      v = bernoulli(rng, p) ? 1.0 : 0.0;
      any = any || v != 0.0;
    }
    if (any || p == 0.0) break;
  }
  return mask;
}

Tensor masked_pretrain_loss(const Tensor& x_hat, const Tensor& x, const Tensor& mask, double eps) {
  if (x_hat.shape() != x.shape() || mask.shape() != x.shape()) {
    throw DimensionError("masked_pretrain_loss: reconstruction " + shape_to_string(x_hat.shape()) + ", input " +
                         shape_to_string(x.shape()) + " and mask " + shape_to_string(mask.shape()) + " differ");
  }
  const double count = std::accumulate(mask.values().begin(), mask.values().end(), 0.0);
  Tensor sq = ops::sum_all(ops::mul(ops::square(ops::sub(x_hat, x)), mask));
  const double denom = count + eps;
  return ops::scale(sq, denom > 0.0 ? 1.0 / denom : 0.0);
}

// ---- schedules --------------------------------------------------------------

double teacher_forcing_prob(std::size_t epoch, std::size_t sampling_decay_epochs) {
  if (sampling_decay_epochs == 0) throw ConfigError("sampling_decay_epochs must be positive");
  return std::max(0.0, 1.0 - static_cast<double>(epoch) / static_cast<double>(sampling_decay_epochs));
}

std::size_t curriculum_horizon(std::size_t epoch, const TrainConfig& cfg, std::size_t horizon) {
  if (cfg.curriculum_step_epochs == 0) throw ConfigError("curriculum_step_epochs must be positive");
  return std::min(horizon, cfg.curriculum_start_horizon + epoch / cfg.curriculum_step_epochs);
}

// ---- optimizer --------------------------------------------------------------

void adam_step(const std::vector<NamedTensor>& params, OptimizerState& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.step == 0 && state.names.empty()) {
    for (const auto& p : params) {
      state.names.push_back(p.name);
      state.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.names.size() != params.size()) {
    throw ContractError("adam_step: optimizer tracks " + std::to_string(state.names.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (p.name != state.names[k] || p.tensor.numel() != state.first_moment[k].size()) {
      throw ContractError("adam_step: parameter '" + p.name + "' does not match optimizer slot '" + state.names[k] + "'");
    }
    Tensor t = p.tensor;
    auto values = t.mutable_values();
    auto grad = t.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (double& g : p.tensor.mutable_grad()) g *= s;
  }
  return norm;
}

// ---- history ------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string history_csv(const TrainHistory& history) {
  std::string out = "epoch,train_loss,val_rmse,tf_prob,horizon\n";
  for (const auto& r : history.records) {
    out += std::to_string(r.epoch) + "," + num(r.train_loss) + "," + num(r.val_rmse) + "," + num(r.tf_prob) + "," +
           std::to_string(r.horizon) + "\n";
  }
  return out;
}

std::string timing_csv(const TrainHistory& history) {
  std::string out = "epoch,seconds\n";
  for (const auto& r : history.records) out += std::to_string(r.epoch) + "," + num(r.seconds) + "\n";
  return out;
}

// ---- prediction -------------------------------------------------------------

std::size_t worker_count() {
  if (const char* env = std::getenv("DYNASTY_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n > 0) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

NdArray predict(const Model& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.empty()) throw ConfigError("predict on an empty dataset");
  const ModelConfig& c = model.config();
  if (ds.num_nodes == 0 || ds.feature_dim != c.feature_dim || ds.history_len != c.history_len) {
    throw DimensionError("dataset (D=" + std::to_string(ds.feature_dim) + ", L=" + std::to_string(ds.history_len) +
                         ") does not match the model (D=" + std::to_string(c.feature_dim) +
                         ", L=" + std::to_string(c.history_len) + ")");
  }
  const std::size_t S = ds.size(), N = ds.num_nodes, H = c.horizon, D = c.feature_dim;
  const std::size_t per_sample = N * H * D;
  NdArray out(Shape{S, N, H, D});
  const std::size_t batches = (S + batch_size - 1) / batch_size;
  const std::size_t workers = std::min(worker_count(), batches);

  auto run = [&](std::size_t first_batch, std::size_t stride) {
    for (std::size_t b = first_batch; b < batches; b += stride) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b * batch_size; i < std::min(S, (b + 1) * batch_size); ++i) idx.push_back(i);
      Batch batch = make_batch(ds, idx);
      ForwardContext ctx;
      Tensor y = model.forecast(batch.inputs, ForecastMode::free_running(), ctx);
      std::copy(y.values().begin(), y.values().end(),
                out.values.begin() + static_cast<std::ptrdiff_t>(idx.front() * per_sample));
    }
  };
  if (workers <= 1) {
    run(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        run(w, workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

double denormalized_rmse(const Model& model, const Dataset& ds) {
  if (!ds.norm) throw ContractError("denormalized_rmse needs a normalized dataset");
  const NdArray pred = denormalize(*ds.norm, predict(model, ds), 3);
  const std::size_t N = ds.num_nodes, H = ds.horizon, D = ds.feature_dim;
  double sq = 0.0;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const NdArray truth = denormalize(*ds.norm, ds.samples[s].y, 1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < H; ++t)
        for (std::size_t d = 0; d < D; ++d) {
          const double e = pred.values[((s * N + n) * H + t) * D + d] - truth.values[(n * D + d) * H + t];
          sq += e * e;
        }
  }
  return std::sqrt(sq / static_cast<double>(ds.size() * N * H * D));
}

// ---- loops ------------------------------------------------------------------

namespace {

void check_trainable(const Model& model, const Dataset& ds, const char* what) {
  if (ds.empty()) throw ConfigError(std::string(what) + ": empty dataset");
  if (!ds.norm) throw ConfigError(std::string(what) + ": dataset must be normalized first");
  const ModelConfig& c = model.config();
  if (ds.feature_dim != c.feature_dim || ds.history_len != c.history_len || ds.horizon != c.horizon) {
    throw DimensionError(std::string(what) + ": dataset (D=" + std::to_string(ds.feature_dim) +
                         ", L=" + std::to_string(ds.history_len) + ", H=" + std::to_string(ds.horizon) +
                         ") does not match the model (D=" + std::to_string(c.feature_dim) +
                         ", L=" + std::to_string(c.history_len) + ", H=" + std::to_string(c.horizon) + ")");
  }
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  return out;
}

// Zeroes every trainable gradient, records loss_of() on a fresh tape, runs
// backward, clips and applies Adam. Returns the loss value.
double optimize(const std::vector<NamedTensor>& params, OptimizerState& opt, const TrainConfig& cfg,
                const std::function<Tensor()>& loss_of) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  Tape tape;
  double value = 0.0;
  {
    TapeScope scope(tape);
    Tensor loss = loss_of();
    value = loss.item();
    tape.backward(loss);
  }
  clip_grad_norm(params, cfg.grad_clip);
  adam_step(params, opt, cfg.learning_rate);
  return value;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

TrainHistory run_pretraining(Model& model, const Dataset& train, const TrainConfig& cfg) {
  check_trainable(model, train, "run_pretraining");
  cfg.validate(model.config().horizon);
  TrainHistory history;
  history.best_val_rmse = std::numeric_limits<double>::quiet_NaN();
  if (cfg.pretrain_epochs == 0) return history;
  Rng rng = derive_rng(cfg.seed, 1);
  const auto params = model.trainable_parameters();
  OptimizerState opt;
  const std::size_t N = train.num_nodes, L = train.history_len, D = train.feature_dim;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double total = 0.0;
    for (const auto& idx : shuffled_batches(train.size(), cfg.batch_size, rng)) {
      Batch batch = make_batch(train, idx);
      std::vector<double> mask;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        NdArray m = sample_mask({N, L, D}, cfg.mask_prob, rng);
        mask.insert(mask.end(), m.values.begin(), m.values.end());
      }
      Tensor m = Tensor::from(batch.inputs.x.shape(), mask);
      std::vector<double> hidden(batch.inputs.x.values().begin(), batch.inputs.x.values().end());
      for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] *= 1.0 - mask[i];
      GraphBatch masked{Tensor::from(batch.inputs.x.shape(), std::move(hidden)), batch.inputs.adj};
      total += static_cast<double>(idx.size()) * optimize(params, opt, cfg, [&] {
                 ForwardContext ctx{true, &rng, nullptr};
                 return masked_pretrain_loss(model.reconstruct(masked, ctx), batch.inputs.x, m, cfg.epsilon);
               });
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train.size());
    rec.val_rmse = std::numeric_limits<double>::quiet_NaN();
    rec.seconds = seconds_since(start);
    history.records.push_back(rec);
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
  return history;
}

TrainHistory run_training(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  check_trainable(model, train, "run_training");
  check_trainable(model, val, "run_training (validation)");
  if (!(*train.norm == *val.norm)) {
    throw ConfigError("run_training: train and validation splits were normalized with different statistics");
  }
  const std::size_t H = model.config().horizon;
  cfg.validate(H);
  TrainHistory history;
  history.best_val_rmse = std::numeric_limits<double>::quiet_NaN();
  if (cfg.max_epochs == 0) return history;

  Rng rng = derive_rng(cfg.seed, 2);
  const auto params = model.trainable_parameters();
  OptimizerState opt;
  Model best = model.clone();
  double best_rmse = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t active = curriculum_horizon(epoch, cfg, H);
    const double p = teacher_forcing_prob(epoch, cfg.sampling_decay_epochs);
    double total = 0.0;
    for (const auto& idx : shuffled_batches(train.size(), cfg.batch_size, rng)) {
      Batch batch = make_batch(train, idx);
      Tensor truth = active == H ? batch.targets : ops::slice(batch.targets, 2, 0, active);
      total += static_cast<double>(idx.size()) * optimize(params, opt, cfg, [&] {
                 ForwardContext ctx{true, &rng, nullptr};
                 ForecastMode mode = ForecastMode::scheduled(batch.targets, p, cfg.mix_alpha, rng);
                 Tensor pred = model.forecast(batch.inputs, mode, ctx, active);
                 return total_loss(pred, truth, cfg.lambda_var, cfg.horizon_decay);
               });
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train.size());
    rec.val_rmse = denormalized_rmse(model, val);
    rec.tf_prob = p;
    rec.horizon = active;
    rec.seconds = seconds_since(start);
    history.records.push_back(rec);
    if (rec.val_rmse < best_rmse) {
      best_rmse = rec.val_rmse;
      history.best_epoch = history.records.size() - 1;
      best.load_values_from(model);
      since_best = 0;
    } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  history.best_val_rmse = best_rmse;
  model.load_values_from(best);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
  return history;
}

}  // namespace dynasty
