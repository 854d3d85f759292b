#include "dynasty/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "dynasty/error.hpp"

namespace dynasty {

Metrics compute_metrics(const NdArray& pred, const NdArray& truth, std::size_t horizon_axis) {
  if (pred.shape != truth.shape) {
    throw DimensionError("compute_metrics: prediction " + shape_to_string(pred.shape) + " and target " +
                         shape_to_string(truth.shape) + " differ");
  }
  if (horizon_axis >= pred.shape.size()) throw DimensionError("compute_metrics: horizon axis out of range");
  const std::size_t H = pred.shape[horizon_axis];
  std::size_t inner = 1;
  for (std::size_t a = horizon_axis + 1; a < pred.shape.size(); ++a) inner *= pred.shape[a];
  std::vector<double> abs_sum(H, 0.0), sq_sum(H, 0.0);
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const std::size_t t = (i / inner) % H;
    const double e = pred.values[i] - truth.values[i];
    abs_sum[t] += std::fabs(e);
    sq_sum[t] += e * e;
  }
  const double per_step = static_cast<double>(pred.values.size() / std::max<std::size_t>(H, 1));
  Metrics m;
  double abs_total = 0.0, sq_total = 0.0;
  for (std::size_t t = 0; t < H; ++t) {
    m.mae_per_step.push_back(abs_sum[t] / per_step);
    m.rmse_per_step.push_back(std::sqrt(sq_sum[t] / per_step));
    abs_total += abs_sum[t];
    sq_total += sq_sum[t];
  }
  const double n = static_cast<double>(pred.values.size());
  m.mae = abs_total / n;
  m.rmse = std::sqrt(sq_total / n);
  return m;
}

nlohmann::json report_json(const EvalReport& r) {
  return {{"mae", r.metrics.mae},
          {"rmse", r.metrics.rmse},
          {"mae_per_step", r.metrics.mae_per_step},
          {"rmse_per_step", r.metrics.rmse_per_step},
          {"samples", r.samples},
          {"provenance", r.provenance}};
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_csv(const EvalReport& r) {
  std::string out = "step,mae,rmse\n";
  for (std::size_t t = 0; t < r.metrics.mae_per_step.size(); ++t)
    out += std::to_string(t + 1) + "," + num(r.metrics.mae_per_step[t]) + "," + num(r.metrics.rmse_per_step[t]) + "\n";
  return out;
}

EvalReport evaluate_forecasts(const NdArray& pred, const Dataset& ds, const std::optional<NormStats>& stats) {
  if (!stats) throw ContractError("evaluate: normalization statistics are required to report data units");
  if (ds.empty()) throw ConfigError("evaluate: empty dataset");
  const std::size_t S = ds.size(), N = ds.num_nodes, H = ds.horizon, D = ds.feature_dim;
  if (pred.shape != Shape{S, N, H, D}) {
    throw DimensionError("evaluate: forecasts " + shape_to_string(pred.shape) + " do not cover the dataset " +
                         shape_to_string({S, N, H, D}));
  }
  NdArray truth(Shape{S, N, H, D});
  for (std::size_t s = 0; s < S; ++s) {
    const NdArray& y = ds.samples[s].y;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < H; ++t)
        for (std::size_t d = 0; d < D; ++d) truth.values[((s * N + n) * H + t) * D + d] = y.values[(n * D + d) * H + t];
  }
  EvalReport r;
  r.metrics = compute_metrics(denormalize(*stats, pred, 3), denormalize(*stats, truth, 3), 2);
  r.samples = S;
  r.provenance = {{"dataset", ds.provenance}, {"num_nodes", N}, {"horizon", H}, {"feature_dim", D}};
  return r;
}

EvalReport evaluate_model(const Model& model, const Dataset& ds, const std::optional<NormStats>& stats) {
  if (!stats) throw ContractError("evaluate: normalization statistics are required to report data units");
  if (ds.num_nodes != 0 && !ds.empty()) {
    const ModelConfig& c = model.config();
    if (ds.horizon != c.horizon) {
      throw DimensionError("evaluate: dataset horizon " + std::to_string(ds.horizon) + " differs from the model's " +
                           std::to_string(c.horizon));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  EvalReport r = evaluate_forecasts(predict(model, ds), ds, stats);
  nlohmann::json cfg = model.config();
  r.provenance["model"] = cfg;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---- baseline ---------------------------------------------------------------

ModelConfig baseline_config(ModelConfig config) {
  config.num_layers = 0;
  config.temporal_attention = false;
  config.edge_dropout_rate = 0.0;
  return config;
}

BaselineResult baseline_forecast(const Dataset& train, const Dataset& val, const Dataset& test,
                                 const ModelConfig& config, const TrainConfig& train_config) {
  BaselineResult out{Model::initialize(baseline_config(config), train_config.seed), {}, {}};
  out.history = run_training(out.model, train, val, train_config);
  out.report = evaluate_model(out.model, test, test.norm);
  out.report.provenance["baseline"] = "node_independent_recurrent";
  return out;
}

// ---- ablations --------------------------------------------------------------

const std::vector<std::string>& ablation_toggles() {
  static const std::vector<std::string> names{"full",          "no_edge_bias",   "no_pretraining",       "no_variation_loss",
                                              "static_graph",  "shuffled_graph", "temporal_attention_on"};
  return names;
}

void AblationSpec::validate() const {
  if (configs.empty()) throw ConfigError("ablation spec lists no configurations");
  if (seeds.empty()) throw ConfigError("ablation spec needs at least one seed");
  const auto& known = ablation_toggles();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (std::find(known.begin(), known.end(), configs[i]) == known.end())
      throw ConfigError("unknown ablation configuration '" + configs[i] + "'");
    if (std::find(configs.begin(), configs.begin() + static_cast<std::ptrdiff_t>(i), configs[i]) !=
        configs.begin() + static_cast<std::ptrdiff_t>(i))
      throw ConfigError("ablation configuration '" + configs[i] + "' is listed twice");
  }
  model.validate();
}

void to_json(nlohmann::json& j, const AblationSpec& s) {
  j = {{"configs", s.configs}, {"seeds", s.seeds}, {"model", s.model}, {"train", s.train}, {"static_tau", s.static_tau}};
}

void from_json(const nlohmann::json& j, AblationSpec& s) {
  if (!j.is_object()) throw ConfigError("ablation spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "configs" && k != "seeds" && k != "model" && k != "train" && k != "static_tau")
      throw ConfigError("unknown ablation spec key '" + k + "'");
  }
  try {
    if (j.contains("configs")) j.at("configs").get_to(s.configs);
    if (j.contains("seeds")) j.at("seeds").get_to(s.seeds);
    if (j.contains("model")) j.at("model").get_to(s.model);
    if (j.contains("train")) j.at("train").get_to(s.train);
    if (j.contains("static_tau")) j.at("static_tau").get_to(s.static_tau);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation spec: ") + e.what());
  }
}

const AblationCell& AblationReport::cell(const std::string& config) const {
  for (const auto& c : cells)
    if (c.config == config) return c;
  throw ContractError("ablation report has no configuration '" + config + "'");
}

namespace {

DatasetSplit graph_variant(const DatasetSplit& data, const std::string& config, double tau, std::uint64_t seed) {
  if (config == "static_graph") {
    return {make_static_variant(data.train, tau), make_static_variant(data.val, tau),
            make_static_variant(data.test, tau)};
  }
  if (config == "shuffled_graph") {
    Rng rng = derive_rng(seed, 77);
    DatasetSplit out;
    out.train = shuffle_graphs(data.train, rng);
    out.val = shuffle_graphs(data.val, rng);
    out.test = shuffle_graphs(data.test, rng);
    return out;
  }
  return data;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

AblationReport run_ablation_suite(const AblationSpec& spec, const DatasetSplit& data) {
  spec.validate();
  AblationReport report;
  for (const auto& config : spec.configs) {
    for (std::uint64_t seed : spec.seeds) {
      const auto start = std::chrono::steady_clock::now();
      ModelConfig mc = spec.model;
      TrainConfig tc = spec.train;
      tc.seed = seed;
      if (config == "temporal_attention_on") mc.temporal_attention = true;
      if (config == "no_variation_loss") tc.lambda_var = 0.0;
      const DatasetSplit split = graph_variant(data, config, spec.static_tau, seed);
      Model model = Model::initialize(mc, seed);
      if (config == "no_edge_bias") model.freeze_edge_bias_output();
      if (config != "no_pretraining") run_pretraining(model, split.train, tc);
      run_training(model, split.train, split.val, tc);
      AblationRun run;
      run.config = config;
      run.seed = seed;
      run.metrics = evaluate_model(model, split.test, split.test.norm).metrics;
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      report.runs.push_back(std::move(run));
    }
  }
  auto rmse_of = [&](const std::string& config, std::uint64_t seed) {
    for (const auto& r : report.runs)
      if (r.config == config && r.seed == seed) return r.metrics.rmse;
    return std::nan("");
  };
  const bool has_full = std::find(spec.configs.begin(), spec.configs.end(), "full") != spec.configs.end();
  for (const auto& config : spec.configs) {
    std::vector<double> mae, rmse;
    for (const auto& r : report.runs) {
      if (r.config != config) continue;
      mae.push_back(r.metrics.mae);
      rmse.push_back(r.metrics.rmse);
    }
    AblationCell cell;
    cell.config = config;
    std::tie(cell.mae_mean, cell.mae_std) = mean_std(mae);
    std::tie(cell.rmse_mean, cell.rmse_std) = mean_std(rmse);
    if (has_full) {
      std::size_t worse = 0;
      for (std::uint64_t seed : spec.seeds) worse += rmse_of(config, seed) > rmse_of("full", seed) ? 1 : 0;
      cell.worse_than_full = worse;
    }
    report.cells.push_back(cell);
  }
  return report;
}

std::string ablation_csv(const AblationReport& report) {
  const std::size_t H = report.runs.empty() ? 0 : report.runs.front().metrics.mae_per_step.size();
  std::string out = "config,seed,mae,rmse";
  for (std::size_t t = 1; t <= H; ++t) out += ",mae_step_" + std::to_string(t);
  for (std::size_t t = 1; t <= H; ++t) out += ",rmse_step_" + std::to_string(t);
  out += ",seconds\n";
  for (const auto& r : report.runs) {
    out += r.config + "," + std::to_string(r.seed) + "," + num(r.metrics.mae) + "," + num(r.metrics.rmse);
    for (double v : r.metrics.mae_per_step) out += "," + num(v);
    for (double v : r.metrics.rmse_per_step) out += "," + num(v);
    out += "," + num(r.seconds) + "\n";
  }
  return out;
}

nlohmann::json ablation_json(const AblationReport& report) {
  nlohmann::json runs = nlohmann::json::array(), cells = nlohmann::json::array();
  for (const auto& r : report.runs) {
    runs.push_back({{"config", r.config},
                    {"seed", r.seed},
                    {"mae", r.metrics.mae},
                    {"rmse", r.metrics.rmse},
                    {"mae_per_step", r.metrics.mae_per_step},
                    {"rmse_per_step", r.metrics.rmse_per_step},
                    {"seconds", r.seconds}});
  }
  for (const auto& c : report.cells) {
    nlohmann::json j = {{"config", c.config},
                        {"mae_mean", c.mae_mean},
                        {"mae_std", c.mae_std},
                        {"rmse_mean", c.rmse_mean},
                        {"rmse_std", c.rmse_std}};
    if (c.worse_than_full) j["seeds_worse_than_full"] = *c.worse_than_full;
    cells.push_back(j);
  }
  return {{"runs", runs}, {"cells", cells}};
}

}  // namespace dynasty
