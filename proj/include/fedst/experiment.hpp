#pragma once

#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fedst/dataset.hpp"
#include "fedst/federation.hpp"
#include "fedst/graph.hpp"

namespace fedst::exp {

// Random geometric sensor layout plus the graph-diffusion series generator;
// the desk-scale stand-in for a real deployment.
struct SyntheticSpec {
  std::size_t n_nodes = 20;
  std::size_t length = 2000;
  double noise_sigma = 0.2;
  double init_sigma = 1.0;
  double sin_amplitude = 0.5;
  double sin_period = 288.0;
  double kappa = 0.1;
  double coord_box = 1.0;  // nodes placed uniformly in [0, box]^2
};

struct ExperimentConfig {
  // Exactly one dataset source: CSV files or a synthetic spec.
  std::string series_csv;
  std::string distance_csv;
  std::string node_table_csv;  // optional; required for inductive runs
  bool use_synthetic = true;
  SyntheticSpec synthetic;

  data::WindowLayout window;
  double train_ratio = 0.7, val_ratio = 0.1, test_ratio = 0.2;
  double kappa = 0.1;  // threshold for CSV-sourced graphs

  fed::TrainingConfig training;

  std::optional<double> eta;  // inductive training fraction
  std::vector<int> sweep_rc, sweep_rs;

  std::string out_dir = "out";
  std::uint64_t seed = 0;

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static ExperimentConfig load(const std::string& path);
};

struct PreparedData {
  graph::SensorGraph graph;
  data::SeriesDataset series;
  data::WindowedDataset windows;
};

PreparedData prepare(const ExperimentConfig& cfg);

// Whole-run entry points; artifacts (metrics.jsonl, ledger.csv,
// summary.json, checkpoints, resolved config) land in cfg.out_dir.
void run_experiment(const ExperimentConfig& cfg);
void run_inductive(const ExperimentConfig& cfg);
void run_sweep(const ExperimentConfig& cfg);
// Generates and writes the synthetic dataset (series + distance matrix +
// node table CSVs) without training.
void run_synth(const ExperimentConfig& cfg);

// Emission helpers shared with tests.
void write_metrics_jsonl(const std::string& path, const fed::RunResult& result,
                         const std::string& run_id);
nlohmann::json run_summary(const fed::RunResult& result, const std::string& run_id);
void save_run_artifacts(const ExperimentConfig& cfg, const fed::RunResult& result,
                        const std::string& out_dir, const std::string& run_id);

// Inductive evaluation on the full graph with the shared trained model.
struct InductiveResult {
  fed::RunResult sub_run;
  double full_val_rmse = 0.0;
  double full_test_rmse = 0.0;
};

InductiveResult inductive_run(const ExperimentConfig& cfg);

}  // namespace fedst::exp
