#include "fedst/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedst/checkpoint.hpp"
#include "fedst/rng.hpp"

namespace fedst::exp {

using nlohmann::json;

void ExperimentConfig::validate() const {
  const bool has_csv = !series_csv.empty();
  if (has_csv == use_synthetic) {
    throw ConfigError("config needs exactly one dataset source "
                      "(series_csv or synthetic)");
  }
  if (has_csv && distance_csv.empty()) {
    throw ConfigError("CSV datasets need a distance_csv graph source");
  }
  if (eta && (*eta <= 0.0 || *eta > 1.0)) {
    throw ConfigError("eta must lie in (0,1]");
  }
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  if (sweep_rc.empty() != sweep_rs.empty()) {
    throw ConfigError("sweep needs both rc and rs lists");
  }
  training.validate();
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    if (d.contains("synthetic")) {
      cfg.use_synthetic = true;
      const json& s = d.at("synthetic");
      cfg.synthetic.n_nodes = s.value("n_nodes", cfg.synthetic.n_nodes);
      cfg.synthetic.length = s.value("length", cfg.synthetic.length);
      cfg.synthetic.noise_sigma = s.value("noise_sigma", cfg.synthetic.noise_sigma);
      cfg.synthetic.init_sigma = s.value("init_sigma", cfg.synthetic.init_sigma);
      cfg.synthetic.sin_amplitude =
          s.value("sin_amplitude", cfg.synthetic.sin_amplitude);
      cfg.synthetic.sin_period = s.value("sin_period", cfg.synthetic.sin_period);
      cfg.synthetic.kappa = s.value("kappa", cfg.synthetic.kappa);
      cfg.synthetic.coord_box = s.value("coord_box", cfg.synthetic.coord_box);
    } else {
      cfg.use_synthetic = false;
      cfg.series_csv = d.value("series_csv", "");
      cfg.distance_csv = d.value("distance_csv", "");
      cfg.node_table_csv = d.value("node_table_csv", "");
      cfg.kappa = d.value("kappa", cfg.kappa);
    }
  }

  if (j.contains("window")) {
    const json& w = j.at("window");
    cfg.window.win = w.value("win", cfg.window.win);
    cfg.window.m = w.value("m", cfg.window.m);
    cfg.window.stride = w.value("stride", cfg.window.stride);
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    cfg.train_ratio = s.value("train", cfg.train_ratio);
    cfg.val_ratio = s.value("val", cfg.val_ratio);
    cfg.test_ratio = s.value("test", cfg.test_ratio);
  }

  if (j.contains("training")) {
    const json& t = j.at("training");
    fed::TrainingConfig& tc = cfg.training;
    if (t.contains("strategy")) {
      tc.strategy = fed::strategy_from_string(t.at("strategy").get<std::string>());
    }
    tc.global_rounds = t.value("global_rounds", tc.global_rounds);
    tc.client_rounds = t.value("client_rounds", tc.client_rounds);
    tc.server_rounds = t.value("server_rounds", tc.server_rounds);
    tc.client_lr = t.value("client_lr", tc.client_lr);
    tc.server_lr = t.value("server_lr", tc.server_lr);
    tc.lambda1 = t.value("lambda1", tc.lambda1);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.shuffle = t.value("shuffle", tc.shuffle);
    tc.forward_chunk = t.value("forward_chunk", tc.forward_chunk);
    tc.patience = t.value("patience", tc.patience);
    if (t.contains("optimizer")) {
      const std::string o = t.at("optimizer").get<std::string>();
      if (o == "adam") {
        tc.optimizer = num::OptimKind::adam;
      } else if (o == "sgd") {
        tc.optimizer = num::OptimKind::sgd;
      } else {
        throw ConfigError("unknown optimizer '" + o + "'");
      }
    }
    tc.model.input_dim = t.value("input_dim", tc.model.input_dim);
    tc.model.enc_hidden = t.value("enc_hidden", tc.model.enc_hidden);
    tc.model.gn_embed = t.value("gn_embed", tc.model.gn_embed);
    tc.model.num_layers = t.value("num_layers", tc.model.num_layers);
    if (t.contains("gn_mlp_hidden")) {
      tc.gn_mlp_hidden = t.at("gn_mlp_hidden").get<std::vector<std::size_t>>();
    }
  }
  cfg.training.seed = cfg.seed;

  if (j.contains("eta")) cfg.eta = j.at("eta").get<double>();
  if (j.contains("sweep")) {
    cfg.sweep_rc = j.at("sweep").value("rc", std::vector<int>{});
    cfg.sweep_rs = j.at("sweep").value("rs", std::vector<int>{});
  }
  return cfg;
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  if (use_synthetic) {
    j["dataset"]["synthetic"] = {
        {"n_nodes", synthetic.n_nodes},       {"length", synthetic.length},
        {"noise_sigma", synthetic.noise_sigma}, {"init_sigma", synthetic.init_sigma},
        {"sin_amplitude", synthetic.sin_amplitude},
        {"sin_period", synthetic.sin_period}, {"kappa", synthetic.kappa},
        {"coord_box", synthetic.coord_box}};
  } else {
    j["dataset"] = {{"series_csv", series_csv},
                    {"distance_csv", distance_csv},
                    {"node_table_csv", node_table_csv},
                    {"kappa", kappa}};
  }
  j["window"] = {{"win", window.win}, {"m", window.m}, {"stride", window.stride}};
  j["split"] = {{"train", train_ratio}, {"val", val_ratio}, {"test", test_ratio}};
  j["training"] = {
      {"strategy", fed::to_string(training.strategy)},
      {"global_rounds", training.global_rounds},
      {"client_rounds", training.client_rounds},
      {"server_rounds", training.server_rounds},
      {"client_lr", training.client_lr},
      {"server_lr", training.server_lr},
      {"lambda1", training.lambda1},
      {"batch_size", training.batch_size},
      {"optimizer", training.optimizer == num::OptimKind::adam ? "adam" : "sgd"},
      {"shuffle", training.shuffle},
      {"forward_chunk", training.forward_chunk},
      {"patience", training.patience},
      {"input_dim", training.model.input_dim},
      {"enc_hidden", training.model.enc_hidden},
      {"gn_embed", training.model.gn_embed},
      {"num_layers", training.model.num_layers},
      {"gn_mlp_hidden", training.gn_mlp_hidden}};
  if (eta) j["eta"] = *eta;
  if (!sweep_rc.empty()) j["sweep"] = {{"rc", sweep_rc}, {"rs", sweep_rs}};
  return j;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

namespace {

graph::SensorGraph synthetic_graph(const SyntheticSpec& spec, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(101);
  const std::size_t n = spec.n_nodes;
  std::vector<std::pair<double, double>> coords(n);
  for (auto& [lon, lat] : coords) {
    lon = rng.uniform(0.0, spec.coord_box);
    lat = rng.uniform(0.0, spec.coord_box);
  }
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = coords[i].first - coords[j].first;
      const double dy = coords[i].second - coords[j].second;
      dist[i][j] = std::sqrt(dx * dx + dy * dy);
    }
  }
  return graph::build_adjacency(dist, spec.kappa, {}, std::move(coords));
}

data::SeriesDataset restrict_series(const data::SeriesDataset& s,
                                    const std::vector<std::size_t>& keep) {
  data::SeriesDataset out;
  out.n_nodes = keep.size();
  out.length = s.length;
  out.readings.resize(out.n_nodes * out.length);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.node_ids.push_back(s.node_ids[keep[i]]);
    for (std::size_t t = 0; t < s.length; ++t) {
      out.readings[i * out.length + t] = s.at(keep[i], t);
    }
  }
  return out;
}

std::string run_id_of(const ExperimentConfig& cfg) {
  return fed::to_string(cfg.training.strategy) + "-seed" + std::to_string(cfg.seed);
}

bool shared_model_strategy(fed::Strategy s) {
  switch (s) {
    case fed::Strategy::at_fedavg:
    case fed::Strategy::fedavg_only:
    case fed::Strategy::sl_fedavg:
    case fed::Strategy::centralized:
      return true;
    default:
      return false;
  }
}

}  // namespace

PreparedData prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  PreparedData out;
  if (cfg.use_synthetic) {
    out.graph = synthetic_graph(cfg.synthetic, cfg.seed);
    data::SynthesisOptions opts;
    opts.noise_sigma = cfg.synthetic.noise_sigma;
    opts.init_sigma = cfg.synthetic.init_sigma;
    opts.sin_amplitude = cfg.synthetic.sin_amplitude;
    opts.sin_period = cfg.synthetic.sin_period;
    opts.seed = Rng(cfg.seed).fork(102).next_u64();
    out.series = data::synthesize(out.graph, cfg.synthetic.length, opts);
  } else {
    graph::DistanceMatrix dm = graph::load_distance_csv(cfg.distance_csv);
    std::vector<std::pair<double, double>> coords;
    if (!cfg.node_table_csv.empty()) {
      graph::NodeTable table = graph::load_node_table_csv(cfg.node_table_csv);
      if (table.node_ids != dm.node_ids) {
        throw ConfigError("node table ids do not match distance matrix ids");
      }
      coords = table.coords;
    }
    out.graph =
        graph::build_adjacency(dm.dist, cfg.kappa, dm.node_ids, std::move(coords));
    out.series = data::load_series_csv(cfg.series_csv);
    if (out.series.node_ids != dm.node_ids) {
      throw ConfigError("series columns do not match distance matrix ids");
    }
  }
  out.windows = data::make_windowed(out.series, cfg.window, cfg.train_ratio,
                                    cfg.val_ratio, cfg.test_ratio);
  return out;
}

void write_metrics_jsonl(const std::string& path, const fed::RunResult& result,
                         const std::string& run_id) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open for writing: " + path);

  // Traffic recorded before the first round (centralized pooling).
  std::uint64_t pre_round = result.ledger.total();
  for (const fed::RoundRecord& r : result.rounds) {
    for (const auto& [phase, bytes] : r.ledger_delta) pre_round -= bytes;
  }
  if (pre_round > 0) {
    json j;
    j["run_id"] = run_id;
    j["strategy"] = fed::to_string(result.cfg.strategy);
    j["round"] = 0;
    j["split"] = "setup";
    j["ledger_bytes"] = {{"raw_pool", pre_round}};
    out << j.dump() << "\n";
  }

  for (const fed::RoundRecord& r : result.rounds) {
    json j;
    j["run_id"] = run_id;
    j["strategy"] = fed::to_string(result.cfg.strategy);
    j["round"] = r.round;
    j["split"] = "val";
    j["rmse"] = r.val_rmse;
    j["train_loss"] = r.train_loss;
    json ledger = json::object();
    for (const auto& [phase, bytes] : r.ledger_delta) {
      ledger[comms::to_string(phase)] = bytes;
    }
    j["ledger_bytes"] = ledger;
    j["wall_ms"] = r.wall_ms;
    out << j.dump() << "\n";
  }
  json tail;
  tail["run_id"] = run_id;
  tail["strategy"] = fed::to_string(result.cfg.strategy);
  tail["round"] = result.rounds_run;
  tail["split"] = "test";
  tail["rmse"] = result.final_test_rmse;
  out << tail.dump() << "\n";
}

json run_summary(const fed::RunResult& result, const std::string& run_id) {
  json j;
  j["run_id"] = run_id;
  j["strategy"] = fed::to_string(result.cfg.strategy);
  j["federated"] = fed::strategy_is_federated(result.cfg.strategy);
  j["seed"] = result.cfg.seed;
  j["rounds_run"] = result.rounds_run;
  j["final_val_rmse"] = result.final_val_rmse;
  j["final_test_rmse"] = result.final_test_rmse;

  json by_phase = json::object();
  for (const auto& [phase, bytes] : result.ledger.totals_by_phase()) {
    by_phase[comms::to_string(phase)] = bytes;
  }
  j["ledger"] = {{"total_bytes", result.ledger.total()},
                 {"by_phase", by_phase},
                 {"messages", result.ledger.message_count()}};
  j["isolation_ok"] = fed::isolation_ok(result.ledger);

  const comms::CostParams p = result.cost_params();
  j["cost_params"] = {{"num_nodes", p.num_nodes},
                      {"node_weights_bytes", p.node_weights_bytes},
                      {"hidden_state_bytes", p.hidden_state_bytes},
                      {"server_rounds", p.server_rounds},
                      {"rounds", p.rounds},
                      {"nonself_directed_edges", p.nonself_directed_edges}};

  const comms::ReconcileReport rep =
      comms::reconcile(result.ledger, fed::to_string(result.cfg.strategy), p);
  json entries = json::array();
  for (const comms::ReconcileEntry& e : rep.entries) {
    entries.push_back({{"phase", e.phase},
                       {"simulated", e.simulated},
                       {"expected", e.expected},
                       {"exact", e.exact}});
  }
  json rec;
  rec["entries"] = entries;
  rec["all_exact"] = rep.all_exact;
  if (rep.analytic_formula_total) {
    rec["analytic_formula_total"] = *rep.analytic_formula_total;
  }
  j["reconcile"] = rec;

  double wall = 0.0;
  for (const fed::RoundRecord& r : result.rounds) wall += r.wall_ms;
  j["wall_ms_total"] = wall;
  return j;
}

void save_run_artifacts(const ExperimentConfig& cfg, const fed::RunResult& result,
                        const std::string& out_dir, const std::string& run_id) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/checkpoints");

  {
    std::ofstream out(out_dir + "/config.json");
    out << cfg.to_json().dump(2) << "\n";
  }
  write_metrics_jsonl(out_dir + "/metrics.jsonl", result, run_id);
  result.ledger.save_csv(out_dir + "/ledger.csv");
  {
    std::ofstream out(out_dir + "/summary.json");
    out << run_summary(result, run_id).dump(2) << "\n";
  }

  const fed::FederationState& fs_state = *result.state;
  if (shared_model_strategy(cfg.training.strategy)) {
    io::save_checkpoint(out_dir + "/checkpoints/node_model",
                        fs_state.server.aggregated.named_params());
  } else {
    for (const fed::NodeState& node : fs_state.nodes) {
      io::save_checkpoint(
          out_dir + "/checkpoints/node_model_" + std::to_string(node.index),
          node.model.named_params());
    }
  }
  if (fed::strategy_uses_gn(cfg.training.strategy)) {
    io::save_checkpoint(out_dir + "/checkpoints/gn",
                        fs_state.server.gn.named_params());
  }
}

void run_experiment(const ExperimentConfig& cfg) {
  PreparedData prep = prepare(cfg);
  fed::RunResult result = fed::run_strategy(cfg.training, prep.windows, prep.graph);
  save_run_artifacts(cfg, result, cfg.out_dir, run_id_of(cfg));
}

InductiveResult inductive_run(const ExperimentConfig& cfg) {
  if (!cfg.eta) throw ConfigError("inductive run needs eta");
  if (!shared_model_strategy(cfg.training.strategy)) {
    throw ConfigError("strategy '" + fed::to_string(cfg.training.strategy) +
                      "' has no shared node model; it cannot serve unseen nodes");
  }
  PreparedData prep = prepare(cfg);
  if (!prep.graph.has_coords()) {
    throw ConfigError("inductive run needs node coordinates");
  }

  graph::SubgraphResult sub = graph::subgraph_by_longitude(prep.graph, *cfg.eta);
  if (sub.graph.size() < 2) {
    throw DegenerateInputError("eta leaves fewer than 2 training nodes");
  }
  data::SeriesDataset sub_series = restrict_series(prep.series, sub.index_map);
  data::WindowedDataset sub_windows = data::make_windowed(
      sub_series, cfg.window, cfg.train_ratio, cfg.val_ratio, cfg.test_ratio);

  InductiveResult out;
  out.sub_run = fed::run_strategy(cfg.training, sub_windows, sub.graph);

  // Full-graph evaluation with the shared model and the training scaler.
  data::WindowedDataset full_windows =
      data::make_windowed(prep.series, cfg.window, sub_windows.stats,
                          cfg.train_ratio, cfg.val_ratio, cfg.test_ratio);
  spatial::GnTopology full_topo = spatial::GnTopology::from_graph(prep.graph);
  const temporal::NodeModel& shared = out.sub_run.state->server.aggregated;
  std::vector<const temporal::NodeModel*> models(prep.graph.size(), &shared);
  const spatial::GnParams* gn = fed::strategy_uses_gn(cfg.training.strategy)
                                    ? &out.sub_run.state->server.gn
                                    : nullptr;
  out.full_val_rmse = fed::evaluate_rmse(models, gn, full_windows, full_topo,
                                         fed::Split::val, cfg.training);
  out.full_test_rmse = fed::evaluate_rmse(models, gn, full_windows, full_topo,
                                          fed::Split::test, cfg.training);
  return out;
}

void run_inductive(const ExperimentConfig& cfg) {
  InductiveResult res = inductive_run(cfg);
  const std::string run_id = run_id_of(cfg) + "-eta";
  save_run_artifacts(cfg, res.sub_run, cfg.out_dir, run_id);
  json extra = {{"eta", *cfg.eta},
                {"subgraph_val_rmse", res.sub_run.final_val_rmse},
                {"subgraph_test_rmse", res.sub_run.final_test_rmse},
                {"full_graph_val_rmse", res.full_val_rmse},
                {"full_graph_test_rmse", res.full_test_rmse}};
  std::ofstream out(cfg.out_dir + "/inductive.json");
  out << extra.dump(2) << "\n";
}

void run_sweep(const ExperimentConfig& cfg) {
  if (cfg.sweep_rc.empty() || cfg.sweep_rs.empty()) {
    throw ConfigError("sweep run needs a (rc, rs) grid");
  }
  PreparedData prep = prepare(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  json cells = json::array();
  for (int rc : cfg.sweep_rc) {
    for (int rs : cfg.sweep_rs) {
      ExperimentConfig cell_cfg = cfg;
      cell_cfg.training.client_rounds = rc;
      cell_cfg.training.server_rounds = rs;
      cell_cfg.out_dir =
          cfg.out_dir + "/cell_rc" + std::to_string(rc) + "_rs" + std::to_string(rs);
      fed::RunResult result =
          fed::run_strategy(cell_cfg.training, prep.windows, prep.graph);
      save_run_artifacts(cell_cfg, result, cell_cfg.out_dir,
                         run_id_of(cell_cfg) + "-rc" + std::to_string(rc) + "-rs" +
                             std::to_string(rs));
      cells.push_back({{"rc", rc},
                       {"rs", rs},
                       {"ratio", static_cast<double>(rc) / rs},
                       {"rounds_run", result.rounds_run},
                       {"final_val_rmse", result.final_val_rmse},
                       {"final_test_rmse", result.final_test_rmse},
                       {"ledger_total_bytes", result.ledger.total()}});
    }
  }
  std::ofstream out(cfg.out_dir + "/sweep_summary.json");
  out << json{{"cells", cells}}.dump(2) << "\n";
}

void run_synth(const ExperimentConfig& cfg) {
  if (!cfg.use_synthetic) {
    throw ConfigError("synth needs a synthetic dataset spec");
  }
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  graph::SensorGraph g = synthetic_graph(cfg.synthetic, cfg.seed);
  data::SynthesisOptions opts;
  opts.noise_sigma = cfg.synthetic.noise_sigma;
  opts.init_sigma = cfg.synthetic.init_sigma;
  opts.sin_amplitude = cfg.synthetic.sin_amplitude;
  opts.sin_period = cfg.synthetic.sin_period;
  opts.seed = Rng(cfg.seed).fork(102).next_u64();
  data::SeriesDataset series = data::synthesize(g, cfg.synthetic.length, opts);

  data::save_series_csv(cfg.out_dir + "/series.csv", series);
  graph::DistanceMatrix dm;
  dm.node_ids = g.node_ids();
  const std::size_t n = g.size();
  dm.dist.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = g.coords()[i].first - g.coords()[j].first;
      const double dy = g.coords()[i].second - g.coords()[j].second;
      dm.dist[i][j] = std::sqrt(dx * dx + dy * dy);
    }
  }
  graph::save_distance_csv(cfg.out_dir + "/distances.csv", dm);
  graph::NodeTable table;
  table.node_ids = g.node_ids();
  table.coords = g.coords();
  graph::save_node_table_csv(cfg.out_dir + "/nodes.csv", table);
  g.save_adjacency_csv(cfg.out_dir + "/adjacency.csv");
}

}  // namespace fedst::exp
