#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynasty/data.hpp"
#include "dynasty/model.hpp"
#include "dynasty/training.hpp"
#include "json.hpp"

namespace dynasty {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<double> mae_per_step;  // length H
  std::vector<double> rmse_per_step;
};

// Per-step values reduce over every axis except horizon_axis.
Metrics compute_metrics(const NdArray& pred, const NdArray& truth, std::size_t horizon_axis);

struct EvalReport {
  Metrics metrics;
  std::size_t samples = 0;
  nlohmann::json provenance = nlohmann::json::object();
  double seconds = 0.0;  // kept out of report_json so reports stay byte-stable
};

nlohmann::json report_json(const EvalReport& report);
// Columns step,mae,rmse; one row per horizon step.
std::string report_csv(const EvalReport& report);

// pred: normalized [S, N, H, D] forecasts for every sample of the dataset.
EvalReport evaluate_forecasts(const NdArray& pred, const Dataset& dataset, const std::optional<NormStats>& stats);
EvalReport evaluate_model(const Model& model, const Dataset& dataset, const std::optional<NormStats>& stats);

// ---- node-independent baseline ----------------------------------------------

// The same encoder/decoder with no spatial layers and no temporal attention:
// each node is summarized and decoded from its own history only.
ModelConfig baseline_config(ModelConfig config);

struct BaselineResult {
  Model model;
  TrainHistory history;
  EvalReport report;
};

BaselineResult baseline_forecast(const Dataset& train, const Dataset& val, const Dataset& test,
                                 const ModelConfig& config, const TrainConfig& train_config);

// ---- ablations ----------------------------------------------------------------

const std::vector<std::string>& ablation_toggles();

struct AblationSpec {
  std::vector<std::string> configs;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ModelConfig model;
  TrainConfig train;
  double static_tau = 0.5;

  void validate() const;  // ConfigError on unknown toggles or no seeds
};

void to_json(nlohmann::json& j, const AblationSpec& s);
void from_json(const nlohmann::json& j, AblationSpec& s);

struct AblationRun {
  std::string config;
  std::uint64_t seed = 0;
  Metrics metrics;
  double seconds = 0.0;
};

struct AblationCell {
  std::string config;
  double mae_mean = 0.0, mae_std = 0.0;
  double rmse_mean = 0.0, rmse_std = 0.0;
  // Seeds on which this configuration's RMSE is above the full model's
  // (only when "full" is part of the suite).
  std::optional<std::size_t> worse_than_full;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  std::vector<AblationCell> cells;  // one per configuration, in spec order

  const AblationCell& cell(const std::string& config) const;
};

// Datasets must be normalized with shared statistics. Graph variants are
// applied to all three splits.
AblationReport run_ablation_suite(const AblationSpec& spec, const DatasetSplit& data);

// config,seed,mae,rmse,mae_step_1..H,rmse_step_1..H,seconds
std::string ablation_csv(const AblationReport& report);
nlohmann::json ablation_json(const AblationReport& report);

}  // namespace dynasty
