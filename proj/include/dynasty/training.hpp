#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dynasty/data.hpp"
#include "dynasty/model.hpp"
#include "json.hpp"

namespace dynasty {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t max_epochs = 100;
  std::size_t pretrain_epochs = 15;
  std::size_t batch_size = 8;
  double lambda_var = 0.1;
  double horizon_decay = 0.9;  // gamma
  double mask_prob = 0.15;
  double epsilon = 1e-8;
  std::size_t sampling_decay_epochs = 30;
  double mix_alpha = 0.5;
  std::size_t curriculum_start_horizon = 2;
  std::size_t curriculum_step_epochs = 5;
  // Epochs without validation improvement before stopping; 0 disables.
  std::size_t early_stop_patience = 10;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 5.0;
  std::uint64_t seed = 0;

  // Throws ConfigError; horizon is the model's H.
  void validate(std::size_t horizon) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---- losses -----------------------------------------------------------------
// Forecast tensors are [B, N, H, D]; the horizon axis is -2.

// Normalized weights gamma^(t-1) / sum_s gamma^(s-1), t = 1..steps.
std::vector<double> horizon_weights(std::size_t steps, double gamma);

Tensor horizon_weighted_mae(const Tensor& pred, const Tensor& truth, double gamma);
Tensor variation_loss(const Tensor& pred, const Tensor& truth);
Tensor total_loss(const Tensor& pred, const Tensor& truth, double lambda, double gamma);

// Independent Bernoulli(p) entries; an all-zero draw is redrawn once and then
// accepted as is.
NdArray sample_mask(const Shape& shape, double p, Rng& rng);

// sum((x_hat - x)^2 * M) / (sum(M) + eps)
Tensor masked_pretrain_loss(const Tensor& x_hat, const Tensor& x, const Tensor& mask, double eps);

// ---- schedules --------------------------------------------------------------

double teacher_forcing_prob(std::size_t epoch, std::size_t sampling_decay_epochs);
std::size_t curriculum_horizon(std::size_t epoch, const TrainConfig& cfg, std::size_t horizon);

// ---- optimizer --------------------------------------------------------------

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One Adam update with bias correction. Every parameter must hold a gradient
// (ContractError naming the first that does not).
void adam_step(const std::vector<NamedTensor>& params, OptimizerState& state, double lr);

// Scales all gradients so that their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

// ---- loops ------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_rmse = 0.0;  // NaN for pretraining epochs
  double tf_prob = 0.0;
  std::size_t horizon = 0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;  // index into records of the lowest val_rmse
  double best_val_rmse = 0.0;
};

// history.csv: epoch,train_loss,val_rmse,tf_prob,horizon (bit-reproducible).
// timing.csv: epoch,seconds.
std::string history_csv(const TrainHistory& history);
std::string timing_csv(const TrainHistory& history);

// Free-running forecasts for every sample, in normalized units: [S, N, H, D].
// Work fans out over DYNASTY_THREADS workers; the result does not depend on
// the worker count.
NdArray predict(const Model& model, const Dataset& dataset, std::size_t batch_size = 16);

std::size_t worker_count();

// RMSE in data units (predictions and targets denormalized).
double denormalized_rmse(const Model& model, const Dataset& dataset);

TrainHistory run_pretraining(Model& model, const Dataset& train, const TrainConfig& cfg);

// Trains in place and leaves the model at the best-validation snapshot.
TrainHistory run_training(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg);

}  // namespace dynasty
