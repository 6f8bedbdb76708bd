#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <utility>

#include "fedst/experiment.hpp"

using namespace fedst;
using exp::ExperimentConfig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_synthetic_config(const std::string& out_dir,
                                       std::uint64_t seed = 5) {
  ExperimentConfig cfg;
  cfg.use_synthetic = true;
  cfg.synthetic.n_nodes = 4;
  cfg.synthetic.length = 120;
  cfg.seed = seed;
  cfg.training.seed = seed;
  cfg.training.strategy = fed::Strategy::at_fedavg;
  cfg.training.global_rounds = 2;
  cfg.training.server_rounds = 1;
  cfg.training.model.enc_hidden = 4;
  cfg.training.model.gn_embed = 4;
  cfg.training.gn_mlp_hidden = {6};
  cfg.training.batch_size = 64;
  cfg.out_dir = out_dir;
  return cfg;
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config json round trip and precedence pieces") {
  ExperimentConfig cfg = tiny_synthetic_config("x");
  cfg.eta = 0.5;
  cfg.sweep_rc = {1, 10};
  cfg.sweep_rs = {1, 20};
  json j = cfg.to_json();
  ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.seed == cfg.seed);
  CHECK(back.training.seed == cfg.seed);  // training seed follows master
  CHECK(back.synthetic.n_nodes == 4);
  CHECK(back.training.model.enc_hidden == 4);
  CHECK(back.eta == cfg.eta);
  CHECK(back.sweep_rc == cfg.sweep_rc);
  CHECK(fed::to_string(back.training.strategy) == "at_fedavg");
}

TEST_CASE("config validation") {
  ExperimentConfig cfg = tiny_synthetic_config("x");
  cfg.series_csv = "also.csv";  // two sources
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  ExperimentConfig cfg2 = tiny_synthetic_config("x");
  cfg2.eta = 1.5;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);

  ExperimentConfig cfg3 = tiny_synthetic_config("x");
  cfg3.training.global_rounds = 0;
  CHECK_THROWS_AS(cfg3.validate(), ConfigError);

  CHECK_THROWS_AS(ExperimentConfig::load("does_not_exist.json"), ConfigError);

  ExperimentConfig ok = tiny_synthetic_config("x");
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("prepare is deterministic for a fixed seed") {
  ExperimentConfig cfg = tiny_synthetic_config("x", 9);
  exp::PreparedData a = exp::prepare(cfg);
  exp::PreparedData b = exp::prepare(cfg);
  CHECK(a.series.readings == b.series.readings);
  CHECK(a.graph.adjacency() == b.graph.adjacency());
  CHECK(a.graph.coords() == b.graph.coords());
  CHECK(a.windows.stats.mean == b.windows.stats.mean);
}

TEST_CASE("run_experiment writes the full artifact set") {
  TempDir dir("harness_run_out");
  ExperimentConfig cfg = tiny_synthetic_config(dir.path.string());
  exp::run_experiment(cfg);

  CHECK(fs::exists(dir.path / "config.json"));
  CHECK(fs::exists(dir.path / "metrics.jsonl"));
  CHECK(fs::exists(dir.path / "ledger.csv"));
  CHECK(fs::exists(dir.path / "summary.json"));
  CHECK(fs::exists(dir.path / "checkpoints/node_model.bin"));
  CHECK(fs::exists(dir.path / "checkpoints/node_model.json"));
  CHECK(fs::exists(dir.path / "checkpoints/gn.bin"));

  std::ifstream in(dir.path / "summary.json");
  json summary = json::parse(in);
  CHECK(summary["strategy"] == "at_fedavg");
  CHECK(summary["isolation_ok"] == true);
  CHECK(summary["reconcile"]["all_exact"] == true);
  CHECK(summary["rounds_run"] == 2);
  CHECK(summary["final_test_rmse"].is_number());

  // summary ledger totals equal the sum over metrics records, exactly
  std::uint64_t from_records = 0;
  for (const json& rec : read_jsonl((dir.path / "metrics.jsonl").string())) {
    if (!rec.contains("ledger_bytes")) continue;
    for (const auto& [phase, bytes] : rec.at("ledger_bytes").items()) {
      from_records += bytes.get<std::uint64_t>();
    }
  }
  CHECK(from_records == summary["ledger"]["total_bytes"].get<std::uint64_t>());
}

TEST_CASE("metrics files are reproducible modulo wall time") {
  TempDir d1("harness_det_a"), d2("harness_det_b");
  ExperimentConfig a = tiny_synthetic_config(d1.path.string(), 31);
  ExperimentConfig b = tiny_synthetic_config(d2.path.string(), 31);
  exp::run_experiment(a);
  exp::run_experiment(b);

  std::vector<json> ra = read_jsonl((d1.path / "metrics.jsonl").string());
  std::vector<json> rb = read_jsonl((d2.path / "metrics.jsonl").string());
  REQUIRE(ra.size() == rb.size());
  int prev_round = -1;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ra[i].erase("wall_ms");
    rb[i].erase("wall_ms");
    CHECK(ra[i] == rb[i]);
    const int round = ra[i].at("round").get<int>();
    CHECK(round >= prev_round);  // monotone round numbers
    prev_round = round;
  }

  // ledgers byte-identical
  std::ifstream la(d1.path / "ledger.csv"), lb(d2.path / "ledger.csv");
  std::string ca((std::istreambuf_iterator<char>(la)),
                 std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(lb)),
                 std::istreambuf_iterator<char>());
  CHECK(ca == cb);
}

TEST_CASE("inductive with eta=1 matches the plain run") {
  TempDir dir("harness_ind_full");
  ExperimentConfig cfg = tiny_synthetic_config(dir.path.string(), 12);
  cfg.eta = 1.0;
  exp::InductiveResult ind = exp::inductive_run(cfg);

  exp::PreparedData prep = exp::prepare(cfg);
  fed::RunResult plain = fed::run_strategy(cfg.training, prep.windows, prep.graph);
  CHECK(ind.sub_run.final_test_rmse == plain.final_test_rmse);
  CHECK(ind.full_test_rmse == plain.final_test_rmse);
}

TEST_CASE("inductive evaluates unseen nodes on the full graph") {
  TempDir dir("harness_ind_half");
  ExperimentConfig cfg = tiny_synthetic_config(dir.path.string(), 13);
  cfg.synthetic.n_nodes = 10;
  cfg.synthetic.length = 150;
  cfg.eta = 0.5;
  exp::InductiveResult ind = exp::inductive_run(cfg);
  CHECK(ind.sub_run.state->nodes.size() == 5);
  CHECK(std::isfinite(ind.full_test_rmse));
  CHECK(std::isfinite(ind.full_val_rmse));

  // strategies without a shared model cannot serve unseen nodes
  ExperimentConfig bad = cfg;
  bad.training.strategy = fed::Strategy::local;
  CHECK_THROWS_AS(exp::inductive_run(bad), ConfigError);
}

TEST_CASE("sweep produces one run per grid cell") {
  TempDir dir("harness_sweep");
  ExperimentConfig cfg = tiny_synthetic_config(dir.path.string(), 14);
  cfg.training.global_rounds = 1;
  cfg.sweep_rc = {1, 2};
  cfg.sweep_rs = {1, 3};
  exp::run_sweep(cfg);

  std::ifstream in(dir.path / "sweep_summary.json");
  json summary = json::parse(in);
  REQUIRE(summary["cells"].size() == 4);
  for (const json& cell : summary["cells"]) {
    const std::string cell_dir = dir.path.string() + "/cell_rc" +
                                 std::to_string(cell["rc"].get<int>()) + "_rs" +
                                 std::to_string(cell["rs"].get<int>());
    CHECK(fs::exists(cell_dir + "/summary.json"));
  }
  // comm cost grows with rs and ignores rc
  auto cost_of = [&](int rc, int rs) -> std::uint64_t {
    for (const json& cell : summary["cells"]) {
      if (cell["rc"] == rc && cell["rs"] == rs) {
        return cell["ledger_total_bytes"].get<std::uint64_t>();
      }
    }
    FAIL("missing cell");
    return 0;
  };
  CHECK(cost_of(1, 3) > cost_of(1, 1));
  CHECK(cost_of(1, 1) == cost_of(2, 1));
}

TEST_CASE("synth writes loadable dataset files") {
  TempDir dir("harness_synth");
  ExperimentConfig cfg = tiny_synthetic_config(dir.path.string(), 15);
  exp::run_synth(cfg);
  CHECK(fs::exists(dir.path / "series.csv"));
  CHECK(fs::exists(dir.path / "distances.csv"));
  CHECK(fs::exists(dir.path / "nodes.csv"));
  CHECK(fs::exists(dir.path / "adjacency.csv"));

  // the emitted files form a valid CSV-sourced experiment
  ExperimentConfig csv_cfg = cfg;
  csv_cfg.use_synthetic = false;
  csv_cfg.series_csv = (dir.path / "series.csv").string();
  csv_cfg.distance_csv = (dir.path / "distances.csv").string();
  csv_cfg.node_table_csv = (dir.path / "nodes.csv").string();
  csv_cfg.out_dir = (dir.path / "csv_run").string();
  exp::PreparedData prep = exp::prepare(csv_cfg);
  CHECK(prep.graph.size() == 4);
  CHECK(prep.series.length == 120);

  // synthetic graph and reloaded graph agree
  exp::PreparedData synth_prep = exp::prepare(cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(prep.graph.weight(i, j) ==
            doctest::Approx(synth_prep.graph.weight(i, j)).epsilon(1e-12));
    }
  }
}

#ifdef FEDST_CLI_PATH
TEST_CASE("cli subcommands and exit codes") {
  TempDir dir("harness_cli");
  const std::string cli = FEDST_CLI_PATH;
  const std::string cfg_path = (dir.path / "config.json").string();
  {
    ExperimentConfig cfg = tiny_synthetic_config((dir.path / "out").string(), 16);
    cfg.training.global_rounds = 1;
    std::ofstream f(cfg_path);
    f << cfg.to_json().dump(2) << "\n";
  }
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  };
  CHECK(run("validate-config --config " + cfg_path) == 0);
  CHECK(run("validate-config --config missing.json") == 2);
  CHECK(run("synth --config " + cfg_path + " --out " + dir.path.string() +
            "/synth_out") == 0);
  CHECK(fs::exists(dir.path / "synth_out/series.csv"));
  CHECK(run("run --config " + cfg_path) == 0);
  CHECK(fs::exists(dir.path / "out/summary.json"));
  // flag overrides beat the file: strategy flips to local
  CHECK(run("run --config " + cfg_path + " --strategy local --out " +
            dir.path.string() + "/local_out") == 0);
  std::ifstream sf(dir.path / "local_out/summary.json");
  json summary = json::parse(sf);
  CHECK(summary["strategy"] == "local");
  CHECK(summary["ledger"]["total_bytes"] == 0);
}
#endif
