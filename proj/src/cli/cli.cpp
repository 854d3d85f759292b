#include "dynasty/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include "dynasty/bundle.hpp"
#include "dynasty/data.hpp"
#include "dynasty/error.hpp"
#include "dynasty/eval.hpp"
#include "dynasty/model.hpp"
#include "dynasty/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dynasty {

// ---- hashing and manifests ----------------------------------------------------

namespace {

std::string sha1_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string git_blob_sha1(const std::string& content) {
  std::string payload = "blob " + std::to_string(content.size());
  payload.push_back('\0');
  return sha1_hex(payload + content);
}

std::string content_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) return git_blob_sha1(read_binary(path));
  if (!fs::is_directory(path)) throw DataError("input " + path.string() + " does not exist");
  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    lines.push_back(fs::relative(entry.path(), path).generic_string() + " " + git_blob_sha1(read_binary(entry.path())));
  }
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l + "\n";
  std::string payload = "tree " + std::to_string(listing.size());
  payload.push_back('\0');
  return sha1_hex(payload + listing);
}

void write_run_manifest(const RunManifest& m, const fs::path& out) {
  json inputs = json::array();
  std::string combined;
  for (const auto& p : m.inputs) {
    const std::string h = content_hash(p);
    inputs.push_back({{"path", p.string()}, {"sha1", h}});
    combined += h + "\n";
  }
  json j = {{"command", m.command},
            {"arguments", m.arguments},
            {"config", m.config},
            {"inputs", inputs},
            {"input_hash", git_blob_sha1(combined)},
            {"outputs", m.outputs},
            {"seed", m.seed},
            {"threads", worker_count()},
            {"started_at", m.started_at},
            {"finished_at", m.finished_at},
            {"wall_seconds", m.wall_seconds}};
  write_text_file(out / "manifest.json", j.dump(2) + "\n");
}

// ---- pipeline helpers ---------------------------------------------------------

namespace {

json read_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError("unknown " + what + " key '" + it.key() + "'");
  }
}

template <class T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

// A dataset bundle, or a directory holding one under dataset/.
fs::path resolve_dataset(const fs::path& path) {
  if (fs::exists(path / "dataset" / "manifest.json")) return path / "dataset";
  if (fs::exists(path / "manifest.json")) return path;
  throw DataError("no dataset found at " + path.string());
}

struct RunConfig {
  json model = json::object();  // partial; completed from the dataset
  TrainConfig train;
  std::array<double, 3> fractions{0.7, 0.1, 0.2};
  std::uint64_t split_seed = 0;
};

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, {"model", "train", "split"}, "run config");
  RunConfig rc;
  rc.model = j.value("model", json::object());
  if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
  if (j.contains("split")) {
    const json& s = j.at("split");
    reject_unknown(s, {"fractions", "seed"}, "split config");
    rc.fractions = field(s, "fractions", rc.fractions);
    rc.split_seed = field(s, "seed", rc.split_seed);
  }
  return rc;
}

// Fills the data-dependent model fields; disagreeing explicit values are errors.
ModelConfig resolve_model(json model, const Dataset& ds) {
  auto pin = [&](const char* key, std::size_t value) {
    if (model.contains(key) && model.at(key).get<std::size_t>() != value) {
      throw DimensionError(std::string("model ") + key + " " + std::to_string(model.at(key).get<std::size_t>()) +
                           " does not match the dataset's " + std::to_string(value));
    }
    model[key] = value;
  };
  pin("feature_dim", ds.feature_dim);
  pin("history_len", ds.history_len);
  pin("horizon", ds.horizon);
  ModelConfig c = model.get<ModelConfig>();
  c.validate();
  return c;
}

struct PreparedRun {
  DatasetSplit split;
  NormStats stats;
  std::vector<fs::path> inputs;
};

// Splits and normalizes the input dataset, or reuses the splits a previous
// stage left in the run directory.
PreparedRun prepare_run(const fs::path& run_dir, const std::optional<fs::path>& data, const RunConfig& rc,
                        std::vector<std::string>& outputs) {
  PreparedRun p;
  const fs::path stored = run_dir / "dataset";
  if (fs::exists(stored / "train" / "manifest.json") && fs::exists(run_dir / "stats.json")) {
    p.split.train = load_dataset(stored / "train");
    p.split.val = load_dataset(stored / "val");
    p.split.test = load_dataset(stored / "test");
    p.stats = read_json_file(run_dir / "stats.json").get<NormStats>();
    p.inputs = {stored, run_dir / "stats.json"};
    return p;
  }
  if (!data) throw ConfigError("--data is required when the run directory holds no prepared splits");
  const fs::path source = resolve_dataset(*data);
  Dataset ds = load_dataset(source);
  if (ds.norm) throw ConfigError("input dataset " + source.string() + " is already normalized");
  DatasetSplit raw = split_dataset(ds, rc.fractions, rc.split_seed);
  p.stats = fit_normalizer(raw.train);
  p.split.train = apply_normalizer(p.stats, raw.train);
  p.split.val = apply_normalizer(p.stats, raw.val);
  p.split.test = apply_normalizer(p.stats, raw.test);
  save_dataset(p.split.train, stored / "train");
  save_dataset(p.split.val, stored / "val");
  save_dataset(p.split.test, stored / "test");
  write_text_file(run_dir / "stats.json", json(p.stats).dump(2) + "\n");
  p.inputs = {source};
  outputs.insert(outputs.end(), {"dataset/train", "dataset/val", "dataset/test", "stats.json"});
  return p;
}

json checkpoint_extra(const PreparedRun& p, const std::string& stage) {
  return {{"stage", stage}, {"num_nodes", p.split.train.num_nodes}, {"norm", p.stats}};
}

Model pretrain_stage(const fs::path& run_dir, const PreparedRun& p, const ModelConfig& mc, const TrainConfig& tc,
                     std::vector<std::string>& outputs) {
  Model model = Model::initialize(mc, tc.seed);
  TrainHistory h = run_pretraining(model, p.split.train, tc);
  save_checkpoint(model, run_dir / "pretrain.ckpt", checkpoint_extra(p, "pretrain"));
  write_text_file(run_dir / "pretrain_history.csv", history_csv(h));
  outputs.insert(outputs.end(), {"pretrain.ckpt", "pretrain_history.csv"});
  return model;
}

struct Invocation {
  std::string command;
  std::vector<std::string> args;
  std::optional<fs::path> config, data, out, ablation_spec, checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  bool skip_pretrain = false;
  std::ostream* log = nullptr;
};

const fs::path& require(const std::optional<fs::path>& p, const char* flag) {
  if (!p) throw CLI::RequiredError(flag);
  return *p;
}

// ---- commands -----------------------------------------------------------------

json cmd_generate(const Invocation& inv, RunManifest& m) {
  DiffusionConfig c;
  if (inv.config) {
    c = read_json_file(*inv.config).get<DiffusionConfig>();
    m.inputs.push_back(*inv.config);
  }
  if (inv.seed) c.seed = *inv.seed;
  m.seed = c.seed;
  const fs::path& out = require(inv.out, "--out");
  Dataset ds = generate_diffusion_dataset(c);
  save_dataset(ds, out / "dataset");
  m.outputs.push_back("dataset");
  *inv.log << "generated " << ds.size() << " samples (N=" << ds.num_nodes << ")\n";
  return c;
}

json cmd_ingest(const Invocation& inv, RunManifest& m) {
  const fs::path& data = require(inv.data, "--data");
  const fs::path& cfg_path = require(inv.config, "--config");
  const json cfg = read_json_file(cfg_path);
  reject_unknown(cfg, {"interval_seconds", "history_len", "horizon"}, "ingest config");
  const auto interval = field<std::int64_t>(cfg, "interval_seconds", 0);
  const auto L = field<std::size_t>(cfg, "history_len", 0), H = field<std::size_t>(cfg, "horizon", 0);
  if (interval <= 0 || L == 0 || H == 0)
    throw ConfigError("ingest config needs positive interval_seconds, history_len and horizon");
  m.inputs = {data, cfg_path};
  Dataset ds = ingest_edge_list(read_edge_csv(data), interval, L, H);
  save_dataset(ds, require(inv.out, "--out") / "dataset");
  m.outputs.push_back("dataset");
  *inv.log << "ingested " << ds.size() << " samples over " << ds.num_nodes << " nodes\n";
  for (const auto& w : ds.warnings) *inv.log << "warning: " << w << "\n";
  return cfg;
}

json cmd_window_corr(const Invocation& inv, RunManifest& m) {
  const fs::path& data = require(inv.data, "--data");
  const fs::path& cfg_path = require(inv.config, "--config");
  const json cfg = read_json_file(cfg_path);
  reject_unknown(cfg, {"window", "stride", "threshold", "history_len", "horizon"}, "window-corr config");
  const auto window = field<std::size_t>(cfg, "window", 0), stride = field<std::size_t>(cfg, "stride", 1);
  const double threshold = field(cfg, "threshold", 0.8);
  const auto L = field<std::size_t>(cfg, "history_len", 0), H = field<std::size_t>(cfg, "horizon", 0);
  m.inputs = {data, cfg_path};
  Dataset ds = window_correlation_graphs(load_series(data), window, stride, threshold, L, H);
  save_dataset(ds, require(inv.out, "--out") / "dataset");
  m.outputs.push_back("dataset");
  *inv.log << "built " << ds.size() << " samples over " << ds.num_nodes << " nodes\n";
  json resolved = cfg;
  resolved["threshold"] = threshold;
  resolved["stride"] = stride;
  return resolved;
}

json cmd_aggregate(const Invocation& inv, RunManifest& m) {
  const fs::path source = resolve_dataset(require(inv.data, "--data"));
  double tau = 0.5;
  json cfg = json::object();
  if (inv.config) {
    cfg = read_json_file(*inv.config);
    reject_unknown(cfg, {"tau"}, "aggregate config");
    tau = field(cfg, "tau", tau);
    m.inputs.push_back(*inv.config);
  }
  m.inputs.insert(m.inputs.begin(), source);
  const fs::path& out = require(inv.out, "--out");
  Dataset ds = load_dataset(source);
  Dataset variant = make_static_variant(ds, tau);
  save_dataset(variant, out / "dataset");
  const auto sequences = adjacency_sequences(ds);
  Bundle graphs;
  graphs.metadata = {{"tau", tau}, {"num_nodes", ds.num_nodes}};
  graphs.tensors.push_back({"consensus", aggregate_static_consensus(sequences, tau)});
  graphs.tensors.push_back({"union", aggregate_static_union(sequences)});
  write_bundle(out / "static_graph", "dynasty-static-graph", graphs);
  m.outputs.insert(m.outputs.end(), {"dataset", "static_graph"});
  for (const auto& w : variant.warnings) *inv.log << "warning: " << w << "\n";
  return {{"tau", tau}};
}

RunConfig load_run_config(const Invocation& inv, RunManifest& m) {
  RunConfig rc;
  if (inv.config) {
    rc = parse_run_config(read_json_file(*inv.config));
    m.inputs.push_back(*inv.config);
  }
  if (inv.seed) rc.train.seed = *inv.seed;
  m.seed = rc.train.seed;
  return rc;
}

json resolved_run_config(const ModelConfig& mc, const RunConfig& rc) {
  return {{"model", mc}, {"train", rc.train}, {"split", {{"fractions", rc.fractions}, {"seed", rc.split_seed}}}};
}

json cmd_pretrain(const Invocation& inv, RunManifest& m) {
  RunConfig rc = load_run_config(inv, m);
  const fs::path& out = require(inv.out, "--out");
  PreparedRun p = prepare_run(out, inv.data, rc, m.outputs);
  m.inputs.insert(m.inputs.end(), p.inputs.begin(), p.inputs.end());
  const ModelConfig mc = resolve_model(rc.model, p.split.train);
  rc.train.validate(mc.horizon);
  pretrain_stage(out, p, mc, rc.train, m.outputs);
  *inv.log << "pretrained for " << rc.train.pretrain_epochs << " epochs\n";
  return resolved_run_config(mc, rc);
}

json cmd_train(const Invocation& inv, RunManifest& m) {
  RunConfig rc = load_run_config(inv, m);
  const fs::path& out = require(inv.out, "--out");
  PreparedRun p = prepare_run(out, inv.data, rc, m.outputs);
  m.inputs.insert(m.inputs.end(), p.inputs.begin(), p.inputs.end());
  const ModelConfig mc = resolve_model(rc.model, p.split.train);
  rc.train.validate(mc.horizon);

  std::optional<Model> model;
  if (inv.skip_pretrain) {
    model = Model::initialize(mc, rc.train.seed);
  } else if (fs::exists(out / "pretrain.ckpt" / "manifest.json")) {
    model = load_checkpoint(out / "pretrain.ckpt");
    if (!(json(model->config()) == json(mc)))
      throw ConfigError("pretrain.ckpt was written with a different model configuration");
    m.inputs.push_back(out / "pretrain.ckpt");
    *inv.log << "resuming from pretrain.ckpt\n";
  } else {
    model = pretrain_stage(out, p, mc, rc.train, m.outputs);
  }
  TrainHistory h = run_training(*model, p.split.train, p.split.val, rc.train);
  json extra = checkpoint_extra(p, "train");
  extra["best_epoch"] = h.best_epoch;
  save_checkpoint(*model, out / "model.ckpt", extra);
  write_text_file(out / "history.csv", history_csv(h));
  write_text_file(out / "timing.csv", timing_csv(h));
  EvalReport report = evaluate_model(*model, p.split.test, p.stats);
  write_text_file(out / "report.json", report_json(report).dump(2) + "\n");
  write_text_file(out / "report.csv", report_csv(report));
  m.outputs.insert(m.outputs.end(), {"model.ckpt", "history.csv", "timing.csv", "report.json", "report.csv"});
  *inv.log << "trained " << h.records.size() << " epochs; best validation RMSE " << h.best_val_rmse
           << "; test RMSE " << report.metrics.rmse << "\n";
  json resolved = resolved_run_config(mc, rc);
  resolved["skip_pretrain"] = inv.skip_pretrain;
  return resolved;
}

json cmd_eval(const Invocation& inv, RunManifest& m) {
  const fs::path& ckpt = require(inv.checkpoint, "--checkpoint");
  const fs::path& data = require(inv.data, "--data");
  fs::path source = fs::exists(data / "dataset" / "test" / "manifest.json") ? data / "dataset" / "test"
                                                                            : resolve_dataset(data);
  m.inputs = {ckpt, source};
  json extra;
  Model model = load_checkpoint(ckpt, &extra);
  if (!extra.is_object() || !extra.contains("num_nodes") || !extra.contains("norm"))
    throw DataError("checkpoint " + ckpt.string() + " carries no dataset statistics");
  const auto trained_n = extra.at("num_nodes").get<std::size_t>();
  const auto stats = extra.at("norm").get<NormStats>();
  Dataset ds = load_dataset(source);
  if (ds.num_nodes != trained_n) {
    throw DimensionError("checkpoint was trained on N=" + std::to_string(trained_n) + " nodes but the dataset has N=" +
                         std::to_string(ds.num_nodes));
  }
  if (!ds.norm) {
    ds = apply_normalizer(stats, ds);
  } else if (!(*ds.norm == stats)) {
    throw ConfigError("dataset was normalized with statistics other than the checkpoint's");
  }
  EvalReport report = evaluate_model(model, ds, stats);
  const fs::path& out = require(inv.out, "--out");
  write_text_file(out / "report.json", report_json(report).dump(2) + "\n");
  write_text_file(out / "report.csv", report_csv(report));
  m.outputs.insert(m.outputs.end(), {"report.json", "report.csv"});
  *inv.log << "MAE " << report.metrics.mae << " RMSE " << report.metrics.rmse << " over " << report.samples
           << " samples\n";
  return {{"checkpoint", ckpt.string()}, {"dataset", source.string()}};
}

json cmd_ablate(const Invocation& inv, RunManifest& m) {
  const fs::path& spec_path = require(inv.ablation_spec, "--ablation-spec");
  const fs::path source = resolve_dataset(require(inv.data, "--data"));
  json spec_json = read_json_file(spec_path);
  RunConfig rc;
  if (spec_json.is_object() && spec_json.contains("split")) {
    rc = parse_run_config({{"split", spec_json.at("split")}});
    spec_json.erase("split");
  }
  AblationSpec spec = spec_json.get<AblationSpec>();
  if (spec.configs.empty()) spec.configs = ablation_toggles();
  if (!inv.seeds.empty()) spec.seeds = inv.seeds;
  m.inputs = {spec_path, source};
  Dataset ds = load_dataset(source);
  if (ds.norm) throw ConfigError("input dataset " + source.string() + " is already normalized");
  json model = spec_json.value("model", json::object());
  spec.model = resolve_model(model, ds);
  spec.validate();
  DatasetSplit raw = split_dataset(ds, rc.fractions, rc.split_seed);
  const NormStats stats = fit_normalizer(raw.train);
  DatasetSplit data{apply_normalizer(stats, raw.train), apply_normalizer(stats, raw.val),
                    apply_normalizer(stats, raw.test)};
  AblationReport report = run_ablation_suite(spec, data);
  const fs::path& out = require(inv.out, "--out");
  write_text_file(out / "ablation.csv", ablation_csv(report));
  write_text_file(out / "ablation.json", ablation_json(report).dump(2) + "\n");
  m.outputs.insert(m.outputs.end(), {"ablation.csv", "ablation.json"});
  for (const auto& c : report.cells)
    *inv.log << c.config << ": RMSE " << c.rmse_mean << " +- " << c.rmse_std << "\n";
  json resolved = spec;
  resolved["split"] = {{"fractions", rc.fractions}, {"seed", rc.split_seed}};
  return resolved;
}

}  // namespace

// ---- dispatch -------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic-graph spatiotemporal forecasting pipeline", "dynasty"};
  app.require_subcommand(1);
  Invocation inv;
  inv.log = &out;
  std::string config, data, output, spec, checkpoint;
  std::uint64_t seed = 0;

  struct Command {
    const char* name;
    const char* help;
    json (*run)(const Invocation&, RunManifest&);
    std::vector<std::string> flags;
  };
  const std::vector<Command> commands{
      {"generate", "Synthesize a diffusion dataset", cmd_generate, {"config", "out", "seed"}},
      {"ingest-edges", "Bucket a temporal edge list into samples", cmd_ingest, {"config", "data", "out"}},
      {"window-corr", "Sliding-window correlation graphs from raw series", cmd_window_corr, {"config", "data", "out"}},
      {"aggregate-static", "Static consensus and union graphs of a dataset", cmd_aggregate, {"config", "data", "out"}},
      {"pretrain", "Split, normalize and run masked pretraining", cmd_pretrain, {"config", "data", "out", "seed"}},
      {"train", "Full pipeline through fine-tuning and test evaluation", cmd_train,
       {"config", "data", "out", "seed", "skip-pretrain"}},
      {"eval", "Evaluate a checkpoint on a dataset", cmd_eval, {"checkpoint", "data", "out"}},
      {"ablate", "Run the ablation suite", cmd_ablate, {"ablation-spec", "data", "out", "seeds"}},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    for (const auto& f : c.flags) {
      if (f == "config") sub->add_option("--config", config, "JSON configuration file");
      if (f == "data") sub->add_option("--data", data, "Input dataset or data file");
      if (f == "out") sub->add_option("--out", output, "Output directory")->required();
      if (f == "seed") sub->add_option("--seed", seed, "Seed override");
      if (f == "skip-pretrain") sub->add_flag("--skip-pretrain", inv.skip_pretrain, "Skip masked pretraining");
      if (f == "ablation-spec")
        sub->add_option("--ablation-spec", spec, "Ablation spec JSON")->required();
      if (f == "seeds") sub->add_option("--seeds", inv.seeds, "Comma-separated seeds")->delimiter(',');
      if (f == "checkpoint") sub->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    }
    subs.push_back(sub);
  }

  if (!args.empty() && args[0].rfind("-", 0) != 0 &&
      std::none_of(commands.begin(), commands.end(), [&](const Command& c) { return args[0] == c.name; })) {
    err << "usage error: unknown command '" << args[0] << "'\n" << app.help();
    return 1;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  CLI::App* chosen = nullptr;
  try {
    app.parse(reversed);
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) chosen = subs[i];
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    CLI::App* context = &app;
    for (auto* s : subs)
      if (s->parsed()) context = s;
    err << context->help();
    return 1;
  }

  inv.command = chosen->get_name();
  inv.args = args;
  auto given = [&](const std::string& flag) {
    const CLI::Option* opt = chosen->get_option_no_throw(flag);
    return opt != nullptr && opt->count() > 0;
  };
  auto set = [&](const std::string& flag, const std::string& value, std::optional<fs::path>& slot) {
    if (given(flag)) slot = fs::path(value);
  };
  set("--config", config, inv.config);
  set("--data", data, inv.data);
  set("--out", output, inv.out);
  set("--ablation-spec", spec, inv.ablation_spec);
  set("--checkpoint", checkpoint, inv.checkpoint);
  if (given("--seed")) inv.seed = seed;

  const auto& cmd = *std::find_if(commands.begin(), commands.end(), [&](const Command& c) { return inv.command == c.name; });
  RunManifest manifest;
  manifest.command = inv.command;
  manifest.arguments = args;
  manifest.started_at = utc_now();
  const auto start = std::chrono::steady_clock::now();
  try {
    fs::create_directories(*inv.out);
    manifest.config = cmd.run(inv, manifest);
    manifest.finished_at = utc_now();
    manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest.outputs.push_back("manifest.json");
    write_run_manifest(manifest, *inv.out);
  } catch (const CLI::RequiredError& e) {
    err << "usage error: " << e.what() << " is required for " << inv.command << "\n" << chosen->help();
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace dynasty
