#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <sstream>

#include "dynasty/bundle.hpp"
#include "dynasty/cli.hpp"
#include "dynasty/data.hpp"
#include "dynasty/eval.hpp"
#include "dynasty/training.hpp"

using namespace dynasty;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dynasty-cli-" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& p) const { return (path / p).string(); }
};

void write(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  write_text_file(path, text);
}

const char* kRunConfig = R"({
  "model": {"hidden_dim": 8, "num_heads": 2, "num_layers": 1, "bias_mlp_hidden": 8, "edge_dropout_rate": 0.0},
  "train": {"max_epochs": 4, "pretrain_epochs": 2, "batch_size": 4, "learning_rate": 0.003, "seed": 3}
})";

// 8-sample diffusion fixture: N=10, L=12, H=8.
std::string make_fixture(const TempDir& dir) {
  write(dir / "gen.json", R"({"num_nodes": 10, "history_len": 12, "horizon": 8, "num_samples": 8, "seed": 21})");
  REQUIRE(cli({"generate", "--config", dir / "gen.json", "--out", dir / "gen"}).code == 0);
  write(dir / "run.json", kRunConfig);
  return dir / "gen";
}

}  // namespace

TEST_CASE("git-style hashes") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  TempDir dir("hash");
  write(dir / "a/x.txt", "hello\n");
  CHECK(content_hash(dir / "a/x.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
  const std::string before = content_hash(dir / "a");
  write(dir / "a/y.txt", "more");
  CHECK(content_hash(dir / "a") != before);
}

TEST_CASE("usage errors") {
  Result r = cli({"train", "--foo", "--out", "x"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--foo") != std::string::npos);
  CHECK(r.err.find("--config") != std::string::npos);  // the command's schema

  r = cli({"fly"});
  CHECK(r.code == 1);
  CHECK(r.err.find("fly") != std::string::npos);

  r = cli({"eval", "--data", "d", "--out", "x"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--checkpoint") != std::string::npos);

  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("missing inputs are data errors") {
  TempDir dir("missing");
  Result r = cli({"train", "--data", dir / "nowhere", "--out", dir / "run"});
  CHECK(r.code == 2);
  CHECK(r.err.find("nowhere") != std::string::npos);
  write(dir / "bad.json", R"({"model": {}, "trian": {}})");
  r = cli({"train", "--config", dir / "bad.json", "--data", dir / "nowhere", "--out", dir / "run"});
  CHECK(r.code == 2);
  CHECK(r.err.find("trian") != std::string::npos);
}

TEST_CASE("full chain on the 8-sample fixture") {
  TempDir dir("chain");
  const std::string data = make_fixture(dir);
  const auto start = std::chrono::steady_clock::now();
  Result r = cli({"train", "--config", dir / "run.json", "--data", data, "--out", dir / "run1"});
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(seconds < 60.0);
  for (const char* f : {"dataset/train", "dataset/val", "dataset/test", "stats.json", "pretrain.ckpt", "model.ckpt",
                        "history.csv", "timing.csv", "report.json", "manifest.json"})
    CHECK_MESSAGE(fs::exists(dir.path / "run1" / f), f);

  const json manifest = json::parse(read_text_file(dir / "run1/manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["config"]["train"]["max_epochs"] == 4);
  CHECK(manifest["config"]["model"]["horizon"] == 8);
  CHECK(manifest["inputs"].size() == 2);
  CHECK(manifest["input_hash"].get<std::string>().size() == 40);
  for (const auto& out : manifest["outputs"]) CHECK(fs::exists(dir.path / "run1" / out.get<std::string>()));
  const json report = json::parse(read_text_file(dir / "run1/report.json"));
  CHECK(report["rmse_per_step"].size() == 8);
  CHECK(report["rmse"].get<double>() >= report["mae"].get<double>());

  SUBCASE("seeded runs reproduce history.csv") {
    REQUIRE(cli({"train", "--config", dir / "run.json", "--data", data, "--out", dir / "run2"}).code == 0);
    CHECK(read_text_file(dir / "run1/history.csv") == read_text_file(dir / "run2/history.csv"));
    CHECK(read_text_file(dir / "run1/report.json") == read_text_file(dir / "run2/report.json"));
    REQUIRE(cli({"train", "--config", dir / "run.json", "--data", data, "--out", dir / "run3", "--seed", "4"}).code == 0);
    CHECK(read_text_file(dir / "run1/history.csv") != read_text_file(dir / "run3/history.csv"));
  }
  SUBCASE("eval reproduces the report byte for byte") {
    Result e = cli({"eval", "--checkpoint", dir / "run1/model.ckpt", "--data", dir / "run1", "--out", dir / "ev"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    CHECK(read_text_file(dir / "ev/report.json") == read_text_file(dir / "run1/report.json"));
    Result again = cli({"eval", "--checkpoint", dir / "run1/model.ckpt", "--data", dir / "run1", "--out", dir / "ev2"});
    CHECK(again.code == 0);
    CHECK(read_text_file(dir / "ev/report.json") == read_text_file(dir / "ev2/report.json"));
  }
  SUBCASE("eval on a dataset with other N names both values") {
    write(dir / "g5.json", R"({"num_nodes": 5, "history_len": 12, "horizon": 8, "num_samples": 3})");
    REQUIRE(cli({"generate", "--config", dir / "g5.json", "--out", dir / "g5"}).code == 0);
    Result e = cli({"eval", "--checkpoint", dir / "run1/model.ckpt", "--data", dir / "g5", "--out", dir / "ev"});
    CHECK(e.code == 2);
    CHECK(e.err.find("N=10") != std::string::npos);
    CHECK(e.err.find("N=5") != std::string::npos);
  }
  SUBCASE("pretrain then train resumes from the stored stage") {
    REQUIRE(cli({"pretrain", "--config", dir / "run.json", "--data", data, "--out", dir / "staged"}).code == 0);
    CHECK(fs::exists(dir.path / "staged/pretrain.ckpt/manifest.json"));
    Result t = cli({"train", "--config", dir / "run.json", "--out", dir / "staged"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    CHECK(t.out.find("resuming") != std::string::npos);
    CHECK(read_text_file(dir / "staged/history.csv") == read_text_file(dir / "run1/history.csv"));
  }
}

TEST_CASE("--skip-pretrain matches the no_pretraining path") {
  TempDir dir("skip");
  const std::string data = make_fixture(dir);
  REQUIRE(cli({"train", "--config", dir / "run.json", "--data", data, "--out", dir / "run", "--skip-pretrain"}).code == 0);
  CHECK(!fs::exists(dir.path / "run/pretrain.ckpt"));

  // Same splits, fresh initialization with the run seed, training only.
  Dataset train = load_dataset(dir.path / "run/dataset/train");
  Dataset val = load_dataset(dir.path / "run/dataset/val");
  const json manifest = json::parse(read_text_file(dir / "run/manifest.json"));
  const ModelConfig mc = manifest["config"]["model"].get<ModelConfig>();
  const TrainConfig tc = manifest["config"]["train"].get<TrainConfig>();
  Model model = Model::initialize(mc, tc.seed);
  CHECK(history_csv(run_training(model, train, val, tc)) == read_text_file(dir / "run/history.csv"));
}

TEST_CASE("data recipes through the CLI") {
  TempDir dir("recipes");
  std::string csv = "source,target,rating,timestamp\n";
  for (int t = 0; t < 12; ++t) {
    csv += "1,2," + std::to_string(1 + t % 3) + "," + std::to_string(t * 10) + "\n";
    csv += "2,3,-1," + std::to_string(t * 10 + 3) + "\n";
  }
  write(dir / "edges.csv", csv);
  write(dir / "ingest.json", R"({"interval_seconds": 10, "history_len": 4, "horizon": 2})");
  Result r = cli({"ingest-edges", "--data", dir / "edges.csv", "--config", dir / "ingest.json", "--out", dir / "ing"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  Dataset ds = load_dataset(dir.path / "ing/dataset");
  CHECK(ds.size() == 12 - 6 + 1);
  CHECK(ds.num_nodes == 3);

  r = cli({"aggregate-static", "--data", dir / "ing", "--out", dir / "agg"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  Bundle graphs = read_bundle(dir.path / "agg/static_graph", "dynasty-static-graph");
  CHECK(graphs.get("union").values == std::vector<double>{0, 1, 0, 0, 0, 1, 0, 0, 0});
  CHECK(graphs.get("consensus").values == std::vector<double>{0, 1, 0, 0, 0, 1, 0, 0, 0});

  NdArray series(Shape{3, 30});
  Rng rng(4);
  for (double& v : series.values) v = standard_normal(rng);
  save_series({series, series}, dir.path / "series");
  write(dir / "corr.json", R"({"window": 5, "stride": 2, "history_len": 3, "horizon": 2})");
  r = cli({"window-corr", "--data", dir / "series", "--config", dir / "corr.json", "--out", dir / "corr"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // (30 - 5) / 2 + 1 = 13 windows per subject, 13 - 5 + 1 = 9 samples each
  CHECK(load_dataset(dir.path / "corr/dataset").size() == 18);
  const json m = json::parse(read_text_file(dir / "corr/manifest.json"));
  CHECK(m["config"]["threshold"] == 0.8);
}

TEST_CASE("ablate writes the table") {
  TempDir dir("ablate");
  write(dir / "gen.json", R"({"num_nodes": 5, "history_len": 4, "horizon": 2, "num_samples": 10, "seed": 2})");
  REQUIRE(cli({"generate", "--config", dir / "gen.json", "--out", dir / "gen"}).code == 0);
  write(dir / "spec.json", R"({
    "configs": ["full", "no_edge_bias"],
    "model": {"hidden_dim": 8, "num_heads": 2, "num_layers": 1, "bias_mlp_hidden": 4},
    "train": {"max_epochs": 2, "pretrain_epochs": 1, "batch_size": 4},
    "split": {"fractions": [0.6, 0.2, 0.2], "seed": 1}
  })");
  Result r = cli({"ablate", "--ablation-spec", dir / "spec.json", "--data", dir / "gen", "--out", dir / "out", "--seeds",
                  "5,6"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string table = read_text_file(dir / "out/ablation.csv");
  CHECK(table.rfind("config,seed,mae,rmse,mae_step_1,mae_step_2,rmse_step_1,rmse_step_2,seconds\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 5);
  const json j = json::parse(read_text_file(dir / "out/ablation.json"));
  CHECK(j["cells"].size() == 2);
  CHECK(j["runs"][0]["seed"] == 5);

  write(dir / "typo.json", R"({"configs": ["full", "no_edges"]})");
  r = cli({"ablate", "--ablation-spec", dir / "typo.json", "--data", dir / "gen", "--out", dir / "out2"});
  CHECK(r.code == 2);
  CHECK(r.err.find("no_edges") != std::string::npos);
}
