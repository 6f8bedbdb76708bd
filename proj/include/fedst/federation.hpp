#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fedst/comms.hpp"
#include "fedst/dataset.hpp"
#include "fedst/graph.hpp"
#include "fedst/optim.hpp"
#include "fedst/rng.hpp"
#include "fedst/spatial.hpp"
#include "fedst/temporal.hpp"

namespace fedst::fed {

enum class Strategy {
  centralized,
  local,
  fedavg_only,
  sl,
  sl_fedavg,
  at_no_fedavg,
  at_fedavg,
  fmtl,
};

Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);
bool strategy_uses_gn(Strategy s);
// Centralized pools raw data and is the only non-federated strategy.
bool strategy_is_federated(Strategy s);

struct TrainingConfig {
  Strategy strategy = Strategy::at_fedavg;
  int global_rounds = 20;  // R_g
  int client_rounds = 1;   // R_c
  int server_rounds = 1;   // R_s
  double server_lr = 1e-3;
  double client_lr = 1e-3;
  double lambda1 = 0.1;
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
  num::OptimKind optimizer = num::OptimKind::adam;
  bool shuffle = false;
  temporal::ModelConfig model;
  std::vector<std::size_t> gn_mlp_hidden = {256, 256, 128};
  // Forward chunk size for whole-split passes (encoding, GN training,
  // evaluation); bounds tape memory without changing any result.
  std::size_t forward_chunk = 512;
  int patience = 0;  // early stopping on val RMSE; 0 disables

  void validate() const;
  spatial::GnConfig gn_config() const;
};

struct NodeState {
  std::size_t index = 0;
  std::string endpoint;  // "node:<i>"
  temporal::NodeModel model;
  std::unique_ptr<num::Optimizer> optimizer;
  const data::NodeShards* shards = nullptr;
  // Cached per-training-window temporal encodings and graph embeddings.
  num::Tensor h_c;  // [W_train, enc_hidden]
  num::Tensor h_g;  // [W_train, gn_embed]; empty before the first server pass
  bool encodings_fresh = false;

  std::size_t sample_count() const { return shards->train.count(); }
};

struct ServerState {
  spatial::GnParams gn;
  std::unique_ptr<num::Optimizer> gn_optimizer;
  // Latest FedAvg result; doubles as the shared model under centralized.
  temporal::NodeModel aggregated;
  bool has_aggregated = false;
};

// Snapshot of everything the protocol touches. Holds pointers into the
// dataset used to build it, which therefore must outlive the state.
struct FederationState {
  std::vector<NodeState> nodes;
  ServerState server;
  spatial::GnTopology topology;
  int round = 0;
};

// --- protocol operations -------------------------------------------------

// Builds the initial state: shared model weights on every node, fresh
// optimizers, GN parameters, topology. run_strategy starts from this; tests
// drive the phase operations against it directly.
FederationState init_federation(const TrainingConfig& cfg,
                                const data::WindowedDataset& dataset,
                                const graph::SensorGraph& g);

// Sample-count-weighted coordinate-wise mean, reduced in ascending node
// index order.
temporal::NodeModel fedavg(const std::vector<const temporal::NodeModel*>& models,
                           const std::vector<std::size_t>& counts);

// R_c local epochs with the cached graph embedding held fixed. Returns the
// mean training loss of the last epoch.
double client_update(NodeState& node, const TrainingConfig& cfg, Rng& batch_rng);

// FMTL variant: every batch objective additionally carries the cluster
// penalty lambda1 * sum_j alpha_ij <w_i, w_i - w_j> against fixed neighbor
// weight snapshots.
double client_update_fmtl(NodeState& node, const TrainingConfig& cfg,
                          const std::vector<std::vector<double>>& weight_snapshots,
                          const std::vector<std::vector<double>>& adjacency,
                          Rng& batch_rng);

// Encodes all training windows with the current encoder, caches the result
// on the node and records the upload.
void client_encode(NodeState& node, const TrainingConfig& cfg,
                   comms::CommLedger& ledger, int round);

struct ClientBackwardResult {
  num::Tensor grad_h_g;  // d(node loss)/d h_g for the given window range
  double sq_error_sum = 0.0;
};

// Decode with [h_c; h_g] for windows [lo, hi), both treated as constants
// w.r.t. node parameters; returns the gradient of the node's full-split
// mean-MSE loss w.r.t. h_g. Node parameters are not updated. Records the
// embedding download and the gradient upload.
ClientBackwardResult client_backward(NodeState& node, const num::Tensor& h_g,
                                     std::size_t lo, std::size_t hi,
                                     const TrainingConfig& cfg,
                                     comms::CommLedger& ledger, int round);

// R_s server rounds of split training on the GN with node models frozen;
// requires fresh encodings from client_encode. Returns sum_i loss_i of the
// last server round.
double server_train_gn(FederationState& fs, const TrainingConfig& cfg,
                       comms::CommLedger& ledger, int round);

// Recomputes embeddings with the final GN weights and pushes them to nodes.
void push_embeddings(FederationState& fs, const TrainingConfig& cfg,
                     comms::CommLedger& ledger, int round);

// Differentiable cluster regularizer lambda1 * sum_i sum_{j!=i} alpha_ij
// <w_i, w_i - w_j>; gradients flow into every connected node's weights.
num::Var fmtl_regularizer(num::Tape& tape, const std::vector<num::Var>& node_weights,
                          const std::vector<std::vector<double>>& adjacency,
                          double lambda1);
double fmtl_regularizer_value(const std::vector<std::vector<double>>& weights,
                              const std::vector<std::vector<double>>& adjacency,
                              double lambda1);

// --- evaluation -----------------------------------------------------------

enum class Split { train, val, test };

// Pooled RMSE on de-normalized predictions over all nodes of a split,
// computed with fresh embeddings (or zero embeddings when gn is null).
// models[i] is the model applied to node i; pass the same pointer for a
// shared model.
double evaluate_rmse(const std::vector<const temporal::NodeModel*>& models,
                     const spatial::GnParams* gn,
                     const data::WindowedDataset& dataset,
                     const spatial::GnTopology& topo, Split split,
                     const TrainingConfig& cfg);

// --- full runs ------------------------------------------------------------

struct RoundRecord {
  int round = 0;
  double train_loss = 0.0;
  double val_rmse = 0.0;
  std::map<comms::Phase, std::uint64_t> ledger_delta;
  double wall_ms = 0.0;
};

struct RunResult {
  TrainingConfig cfg;
  std::vector<RoundRecord> rounds;
  int rounds_run = 0;
  double final_val_rmse = 0.0;
  double final_test_rmse = 0.0;
  comms::CommLedger ledger;
  std::unique_ptr<FederationState> state;

  // Actual per-round payload sizes, for formula reconciliation.
  comms::CostParams cost_params() const;
};

// Executes the selected strategy for up to R_g global rounds. The dataset
// must stay alive as long as the returned state is used.
RunResult run_strategy(const TrainingConfig& cfg,
                       const data::WindowedDataset& dataset,
                       const graph::SensorGraph& g);

// True when no recorded payload carries raw node data.
bool isolation_ok(const comms::CommLedger& ledger);

}  // namespace fedst::fed
