#include "fedst/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace fedst::fed {

using num::Tape;
using num::Tensor;
using num::Var;

Strategy strategy_from_string(const std::string& s) {
  if (s == "centralized") return Strategy::centralized;
  if (s == "local") return Strategy::local;
  if (s == "fedavg_only") return Strategy::fedavg_only;
  if (s == "sl") return Strategy::sl;
  if (s == "sl_fedavg") return Strategy::sl_fedavg;
  if (s == "at_no_fedavg") return Strategy::at_no_fedavg;
  if (s == "at_fedavg") return Strategy::at_fedavg;
  if (s == "fmtl") return Strategy::fmtl;
  throw ConfigError("unknown strategy '" + s + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::centralized: return "centralized";
    case Strategy::local: return "local";
    case Strategy::fedavg_only: return "fedavg_only";
    case Strategy::sl: return "sl";
    case Strategy::sl_fedavg: return "sl_fedavg";
    case Strategy::at_no_fedavg: return "at_no_fedavg";
    case Strategy::at_fedavg: return "at_fedavg";
    case Strategy::fmtl: return "fmtl";
  }
  return "unknown";
}

bool strategy_uses_gn(Strategy s) {
  switch (s) {
    case Strategy::centralized:
    case Strategy::sl:
    case Strategy::sl_fedavg:
    case Strategy::at_no_fedavg:
    case Strategy::at_fedavg:
      return true;
    default:
      return false;
  }
}

bool strategy_is_federated(Strategy s) { return s != Strategy::centralized; }

void TrainingConfig::validate() const {
  if (global_rounds < 1 || client_rounds < 1 || server_rounds < 1) {
    throw ConfigError("round counts must be >= 1");
  }
  if (server_lr <= 0.0 || client_lr <= 0.0) {
    throw ConfigError("learning rates must be positive");
  }
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (forward_chunk == 0) throw ConfigError("forward chunk must be positive");
  if (lambda1 < 0.0) throw ConfigError("lambda1 must be non-negative");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (model.input_dim == 0 || model.enc_hidden == 0 || model.gn_embed == 0) {
    throw ConfigError("model widths must be positive");
  }
}

spatial::GnConfig TrainingConfig::gn_config() const {
  spatial::GnConfig c;
  c.node_in = model.enc_hidden;
  c.embed = model.gn_embed;
  c.mlp_hidden = gn_mlp_hidden;
  return c;
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t count,
                                                              std::size_t chunk) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t lo = 0; lo < count; lo += chunk) {
    out.emplace_back(lo, std::min(lo + chunk, count));
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count,
                                                   std::size_t batch, bool shuffle,
                                                   Rng& rng) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < count; lo += batch) {
    const std::size_t hi = std::min(lo + batch, count);
    out.emplace_back(order.begin() + lo, order.begin() + hi);
  }
  return out;
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t c = t.dim(1);
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = t.at(idx[i], j);
  }
  return out;
}

Tensor take_rows_range(const Tensor& t, std::size_t lo, std::size_t hi) {
  const std::size_t c = t.dim(1);
  Tensor out({hi - lo, c});
  for (std::size_t i = lo; i < hi; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i - lo, j) = t.at(i, j);
  }
  return out;
}

std::unique_ptr<num::Optimizer> make_optimizer(std::vector<Tensor*> params,
                                               num::OptimKind kind, double lr) {
  num::OptimConfig oc;
  oc.kind = kind;
  oc.lr = lr;
  return std::make_unique<num::Optimizer>(std::move(params), oc);
}

Rng batch_rng(const TrainingConfig& cfg, int round, std::size_t node) {
  Rng master(cfg.seed);
  return master.fork(0x1000000000000000ULL + static_cast<std::uint64_t>(round) * 1000003ULL +
                     node);
}

// Windows steps from the materialized shard widths.
struct StepDims {
  std::size_t d, m, n_out;
};

StepDims step_dims(const data::NodeSplit& split, const TrainingConfig& cfg) {
  StepDims s;
  s.d = cfg.model.input_dim;
  s.m = split.x.dim(1) / s.d;
  s.n_out = split.y.dim(1) / s.d;
  return s;
}

Tensor last_frame_of(const Tensor& x, const StepDims& dims,
                     const std::vector<std::size_t>& idx) {
  Tensor out({idx.size(), dims.d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < dims.d; ++j) {
      out.at(i, j) = x.at(idx[i], (dims.m - 1) * dims.d + j);
    }
  }
  return out;
}

const data::NodeSplit& pick_split(const data::NodeShards& shards, Split split) {
  switch (split) {
    case Split::train: return shards.train;
    case Split::val: return shards.val;
    case Split::test: return shards.test;
  }
  throw ContractError("invalid split");
}

// Encoder forward without gradients; returns the final hidden states.
Tensor encode_values(const temporal::NodeModel& model, Tensor x, std::size_t m) {
  Tape tape;
  temporal::NodeModelVars vars = temporal::bind_const(tape, model);
  Var xv = tape.constant(std::move(x));
  Var h = temporal::encode(tape, vars, xv, m);
  return tape.value(h);
}

double check_finite_loss(double v, const std::string& context) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite loss (" + context + ")");
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// protocol operations
// ---------------------------------------------------------------------------

temporal::NodeModel fedavg(const std::vector<const temporal::NodeModel*>& models,
                           const std::vector<std::size_t>& counts) {
  if (models.empty()) throw ContractError("fedavg of an empty model list");
  if (models.size() != counts.size()) {
    throw ContractError("fedavg needs one sample count per model");
  }
  for (std::size_t c : counts) {
    if (c == 0) throw ContractError("fedavg sample counts must be positive");
  }
  const std::vector<double> first = temporal::flatten(*models[0]);
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);

  std::vector<double> acc(first.size(), 0.0);
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::vector<double> flat = temporal::flatten(*models[i]);
    if (flat.size() != acc.size()) {
      throw DimensionError("fedavg models have different parameter counts: " +
                           std::to_string(acc.size()) + " vs " +
                           std::to_string(flat.size()));
    }
    const double w = static_cast<double>(counts[i]) / total;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * flat[k];
  }
  temporal::NodeModel out = *models[0];
  temporal::unflatten(out, acc);
  return out;
}

double client_update(NodeState& node, const TrainingConfig& cfg, Rng& batch_rng) {
  return client_update_fmtl(node, cfg, {}, {}, batch_rng);
}

double client_update_fmtl(NodeState& node, const TrainingConfig& cfg,
                          const std::vector<std::vector<double>>& weight_snapshots,
                          const std::vector<std::vector<double>>& adjacency,
                          Rng& batch_rng) {
  const data::NodeSplit& tr = node.shards->train;
  if (tr.count() == 0) {
    throw DegenerateInputError(node.endpoint + " has no local training data");
  }
  const StepDims dims = step_dims(tr, cfg);

  // FMTL penalty pieces against fixed neighbor snapshots:
  //   d/dw_i [ l1 * sum_j a_ij <w_i, w_i - w_j> ] = 2*l1*(sum_j a_ij)*w_i
  //                                                 - l1 * sum_j a_ij w_j
  const bool with_penalty = !weight_snapshots.empty() && cfg.lambda1 > 0.0;
  double alpha_sum = 0.0;
  std::vector<double> penalty_lin;
  if (with_penalty) {
    penalty_lin.assign(weight_snapshots[node.index].size(), 0.0);
    for (std::size_t j = 0; j < weight_snapshots.size(); ++j) {
      if (j == node.index) continue;
      const double a = adjacency[node.index][j];
      if (a == 0.0) continue;
      alpha_sum += a;
      for (std::size_t k = 0; k < penalty_lin.size(); ++k) {
        penalty_lin[k] += cfg.lambda1 * a * weight_snapshots[j][k];
      }
    }
  }

  double last_epoch_loss = 0.0;
  for (int rc = 0; rc < cfg.client_rounds; ++rc) {
    double sq = 0.0;
    std::size_t elems = 0;
    for (const std::vector<std::size_t>& idx :
         make_batches(tr.count(), cfg.batch_size, cfg.shuffle, batch_rng)) {
      Tape tape;
      temporal::NodeModelVars vars = temporal::bind(tape, node.model);
      Var x = tape.constant(take_rows(tr.x, idx));
      Var y = tape.constant(take_rows(tr.y, idx));
      Tensor hg = node.h_g.numel() > 0
                      ? take_rows(node.h_g, idx)
                      : Tensor({idx.size(), cfg.model.gn_embed});
      Var hgv = tape.constant(std::move(hg));
      Var h = temporal::encode(tape, vars, x, dims.m);
      Var state = num::concat_last({h, hgv});
      Var last = tape.constant(last_frame_of(tr.x, dims, idx));
      Var pred = temporal::decode(tape, vars, last, state, dims.n_out);
      Var loss = temporal::node_loss(pred, y);
      const double lv = check_finite_loss(tape.value(loss)[0], node.endpoint);

      node.optimizer->zero_grad();
      tape.backward(loss);
      if (with_penalty) {
        std::size_t off = 0;
        for (Tensor* p : node.model.params()) {
          std::vector<double>& g = p->grad();
          for (std::size_t k = 0; k < p->numel(); ++k, ++off) {
            g[k] += 2.0 * cfg.lambda1 * alpha_sum * (*p)[k] - penalty_lin[off];
          }
        }
      }
      node.optimizer->step();

      const std::size_t batch_elems = idx.size() * dims.n_out * dims.d;
      sq += lv * static_cast<double>(batch_elems);
      elems += batch_elems;
    }
    last_epoch_loss = sq / static_cast<double>(elems);
  }
  return last_epoch_loss;
}

void client_encode(NodeState& node, const TrainingConfig& cfg,
                   comms::CommLedger& ledger, int round) {
  const data::NodeSplit& tr = node.shards->train;
  const StepDims dims = step_dims(tr, cfg);
  node.h_c = Tensor({tr.count(), cfg.model.enc_hidden});
  for (const auto& [lo, hi] : chunk_ranges(tr.count(), cfg.forward_chunk)) {
    const Tensor h =
        encode_values(node.model, take_rows_range(tr.x, lo, hi), dims.m);
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = 0; j < cfg.model.enc_hidden; ++j) {
        node.h_c.at(i, j) = h.at(i - lo, j);
      }
    }
  }
  node.encodings_fresh = true;
  ledger.record(comms::Message{
      round, node.endpoint, "server", comms::Phase::encode_up,
      comms::PayloadKind::encoding,
      static_cast<std::uint64_t>(node.h_c.numel()) * sizeof(double)});
}

ClientBackwardResult client_backward(NodeState& node, const Tensor& h_g,
                                     std::size_t lo, std::size_t hi,
                                     const TrainingConfig& cfg,
                                     comms::CommLedger& ledger, int round) {
  const data::NodeSplit& tr = node.shards->train;
  if (hi > tr.count() || lo >= hi) {
    throw ContractError("client_backward window range out of bounds");
  }
  if (h_g.rank() != 2 || h_g.dim(0) != hi - lo || h_g.dim(1) != cfg.model.gn_embed) {
    throw DimensionError("embedding shape " + num::shape_str(h_g.shape()) +
                         " does not match [" + std::to_string(hi - lo) + "," +
                         std::to_string(cfg.model.gn_embed) + "]");
  }
  if (node.h_c.numel() == 0) {
    throw ProtocolError(node.endpoint + " has no cached encodings");
  }

  ledger.record(comms::Message{
      round, "server", node.endpoint, comms::Phase::embed_down,
      comms::PayloadKind::embedding,
      static_cast<std::uint64_t>(h_g.numel()) * sizeof(double)});

  const StepDims dims = step_dims(tr, cfg);
  Tape tape;
  temporal::NodeModelVars vars = temporal::bind_const(tape, node.model);
  Var y = tape.constant(take_rows_range(tr.y, lo, hi));
  Var hc = tape.constant(take_rows_range(node.h_c, lo, hi));
  Var hg = tape.input(h_g);
  Var state = num::concat_last({hc, hg});
  std::vector<std::size_t> idx(hi - lo);
  std::iota(idx.begin(), idx.end(), lo);
  Var last = tape.constant(last_frame_of(tr.x, dims, idx));
  Var pred = temporal::decode(tape, vars, last, state, dims.n_out);
  Var diff = num::sub(pred, y);
  Var sq = num::sum(num::mul(diff, diff));

  ClientBackwardResult res;
  res.sq_error_sum = check_finite_loss(tape.value(sq)[0], node.endpoint);
  // Seed with 1/total_elems so the result is the gradient of the node's
  // full-split mean MSE regardless of chunking.
  const double total_elems =
      static_cast<double>(tr.count()) * static_cast<double>(dims.n_out) *
      static_cast<double>(dims.d);
  tape.backward(sq, Tensor::scalar(1.0 / total_elems));
  res.grad_h_g = tape.grad_tensor(hg);

  ledger.record(comms::Message{
      round, node.endpoint, "server", comms::Phase::grad_up,
      comms::PayloadKind::gradient,
      static_cast<std::uint64_t>(res.grad_h_g.numel()) * sizeof(double)});
  return res;
}

namespace {

// Stacks per-node encoding rows [lo, hi) as [(hi-lo)*N, H] with window b's
// node i at row (b-lo)*N + i.
Tensor assemble_h_all(const std::vector<NodeState>& nodes, std::size_t lo,
                      std::size_t hi, std::size_t width) {
  const std::size_t n = nodes.size();
  Tensor out({(hi - lo) * n, width});
  for (std::size_t b = lo; b < hi; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        out.at((b - lo) * n + i, j) = nodes[i].h_c.at(b, j);
      }
    }
  }
  return out;
}

}  // namespace

double server_train_gn(FederationState& fs, const TrainingConfig& cfg,
                       comms::CommLedger& ledger, int round) {
  for (const NodeState& node : fs.nodes) {
    if (!node.encodings_fresh) {
      throw ProtocolError("GN training before encoding upload from " +
                          node.endpoint);
    }
  }
  const std::size_t n = fs.nodes.size();
  const std::size_t windows = fs.nodes[0].sample_count();
  const std::size_t h_enc = cfg.model.enc_hidden;
  const std::size_t h_gn = cfg.model.gn_embed;

  double last_loss_sum = 0.0;
  for (int rs = 0; rs < cfg.server_rounds; ++rs) {
    fs.server.gn_optimizer->zero_grad();
    double loss_sum = 0.0;
    for (const auto& [lo, hi] : chunk_ranges(windows, cfg.forward_chunk)) {
      Tape tape;
      spatial::GnVars gnv = spatial::bind(tape, fs.server.gn);
      Var h_in = tape.constant(assemble_h_all(fs.nodes, lo, hi, h_enc));
      Var emb = spatial::gn_forward(tape, gnv, h_in, fs.topology, hi - lo);

      Tensor seed({(hi - lo) * n, h_gn});
      for (std::size_t i = 0; i < n; ++i) {
        Tensor h_g_i({hi - lo, h_gn});
        const Tensor& emb_v = tape.value(emb);
        for (std::size_t b = 0; b < hi - lo; ++b) {
          for (std::size_t j = 0; j < h_gn; ++j) {
            h_g_i.at(b, j) = emb_v.at(b * n + i, j);
          }
        }
        ClientBackwardResult res =
            client_backward(fs.nodes[i], h_g_i, lo, hi, cfg, ledger, round);
        const StepDims dims = step_dims(fs.nodes[i].shards->train, cfg);
        loss_sum += res.sq_error_sum /
                    (static_cast<double>(fs.nodes[i].sample_count()) *
                     static_cast<double>(dims.n_out) * static_cast<double>(dims.d));
        for (std::size_t b = 0; b < hi - lo; ++b) {
          for (std::size_t j = 0; j < h_gn; ++j) {
            seed.at(b * n + i, j) = res.grad_h_g.at(b, j);
          }
        }
      }
      tape.backward(emb, seed);
    }
    fs.server.gn_optimizer->step();
    last_loss_sum = loss_sum;
  }
  return last_loss_sum;
}

void push_embeddings(FederationState& fs, const TrainingConfig& cfg,
                     comms::CommLedger& ledger, int round) {
  const std::size_t n = fs.nodes.size();
  const std::size_t windows = fs.nodes[0].sample_count();
  const std::size_t h_gn = cfg.model.gn_embed;
  for (NodeState& node : fs.nodes) node.h_g = Tensor({windows, h_gn});

  for (const auto& [lo, hi] : chunk_ranges(windows, cfg.forward_chunk)) {
    Tape tape;
    spatial::GnVars gnv = spatial::bind_const(tape, fs.server.gn);
    Var h_in = tape.constant(assemble_h_all(fs.nodes, lo, hi, cfg.model.enc_hidden));
    Var emb = spatial::gn_forward(tape, gnv, h_in, fs.topology, hi - lo);
    const Tensor& emb_v = tape.value(emb);
    for (std::size_t b = lo; b < hi; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < h_gn; ++j) {
          fs.nodes[i].h_g.at(b, j) = emb_v.at((b - lo) * n + i, j);
        }
      }
    }
  }
  for (NodeState& node : fs.nodes) {
    ledger.record(comms::Message{
        round, "server", node.endpoint, comms::Phase::embed_down,
        comms::PayloadKind::embedding,
        static_cast<std::uint64_t>(node.h_g.numel()) * sizeof(double)});
  }
}

num::Var fmtl_regularizer(Tape& tape, const std::vector<Var>& node_weights,
                          const std::vector<std::vector<double>>& adjacency,
                          double lambda1) {
  const std::size_t n = node_weights.size();
  if (adjacency.size() != n) {
    throw DimensionError("adjacency rows " + std::to_string(adjacency.size()) +
                         " do not match " + std::to_string(n) + " weight vectors");
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (node_weights[i].numel() != node_weights[0].numel()) {
      throw DimensionError("node weight vectors differ in length");
    }
  }
  Var acc = tape.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double a = adjacency[i][j];
      if (a == 0.0) continue;
      Var diff = num::sub(node_weights[i], node_weights[j]);
      Var dot = num::sum(num::mul(node_weights[i], diff));
      acc = num::add(acc, num::mul_scalar(dot, a));
    }
  }
  return num::mul_scalar(acc, lambda1);
}

double fmtl_regularizer_value(const std::vector<std::vector<double>>& weights,
                              const std::vector<std::vector<double>>& adjacency,
                              double lambda1) {
  const std::size_t n = weights.size();
  if (adjacency.size() != n) {
    throw DimensionError("adjacency rows do not match weight vectors");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double a = adjacency[i][j];
      if (a == 0.0) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < weights[i].size(); ++k) {
        dot += weights[i][k] * (weights[i][k] - weights[j][k]);
      }
      acc += a * dot;
    }
  }
  return lambda1 * acc;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

double evaluate_rmse(const std::vector<const temporal::NodeModel*>& models,
                     const spatial::GnParams* gn,
                     const data::WindowedDataset& dataset,
                     const spatial::GnTopology& topo, Split split,
                     const TrainingConfig& cfg) {
  const std::size_t n = dataset.n_nodes();
  if (models.size() != n) {
    throw DimensionError("got " + std::to_string(models.size()) + " models for " +
                         std::to_string(n) + " nodes");
  }
  if (topo.n_nodes != n) {
    throw GraphConsistencyError("graph has " + std::to_string(topo.n_nodes) +
                                " nodes, dataset has " + std::to_string(n));
  }
  const std::size_t count = pick_split(dataset.nodes[0], split).count();
  if (count == 0) throw DegenerateInputError("empty evaluation split");
  const StepDims dims = step_dims(pick_split(dataset.nodes[0], split), cfg);
  const std::size_t h_enc = cfg.model.enc_hidden;
  const std::size_t h_gn = cfg.model.gn_embed;

  double total_sq = 0.0;
  std::size_t total_elems = 0;
  for (const auto& [lo, hi] : chunk_ranges(count, cfg.forward_chunk)) {
    const std::size_t b = hi - lo;
    // Temporal encodings per node, then embeddings if a GN is in play.
    std::vector<Tensor> h(n);
    for (std::size_t i = 0; i < n; ++i) {
      const data::NodeSplit& sp = pick_split(dataset.nodes[i], split);
      h[i] = encode_values(*models[i], take_rows_range(sp.x, lo, hi), dims.m);
    }
    Tensor emb;
    if (gn != nullptr) {
      Tensor h_all({b * n, h_enc});
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < h_enc; ++j) {
            h_all.at(w * n + i, j) = h[i].at(w, j);
          }
        }
      }
      Tape tape;
      spatial::GnVars gnv = spatial::bind_const(tape, *gn);
      Var emb_var =
          spatial::gn_forward(tape, gnv, tape.constant(std::move(h_all)), topo, b);
      emb = tape.value(emb_var);
    }

    for (std::size_t i = 0; i < n; ++i) {
      const data::NodeSplit& sp = pick_split(dataset.nodes[i], split);
      Tensor state({b, h_enc + h_gn});
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < h_enc; ++j) state.at(w, j) = h[i].at(w, j);
        if (gn != nullptr) {
          for (std::size_t j = 0; j < h_gn; ++j) {
            state.at(w, h_enc + j) = emb.at(w * n + i, j);
          }
        }
      }
      std::vector<std::size_t> idx(b);
      std::iota(idx.begin(), idx.end(), lo);

      Tape tape;
      temporal::NodeModelVars vars = temporal::bind_const(tape, *models[i]);
      Var last = tape.constant(last_frame_of(sp.x, dims, idx));
      Var pred = temporal::decode(tape, vars, last, tape.constant(std::move(state)),
                                  dims.n_out);
      const Tensor& pv = tape.value(pred);
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < dims.n_out * dims.d; ++j) {
          const double diff = pv.at(w, j) - sp.y.at(lo + w, j);
          total_sq += diff * diff;
        }
      }
      total_elems += b * dims.n_out * dims.d;
    }
  }
  // De-normalized pooled RMSE: the mean shift cancels in the difference.
  return dataset.stats.stddev *
         std::sqrt(total_sq / static_cast<double>(total_elems));
}

// ---------------------------------------------------------------------------
// strategy rounds
// ---------------------------------------------------------------------------

namespace {

void redistribute(FederationState& fs, const temporal::NodeModel& aggregated,
                  const TrainingConfig& cfg, comms::CommLedger& ledger, int round) {
  fs.server.aggregated = aggregated;
  fs.server.has_aggregated = true;
  for (NodeState& node : fs.nodes) {
    ledger.record(comms::Message{round, "server", node.endpoint,
                                 comms::Phase::fedavg_down,
                                 comms::PayloadKind::parameters,
                                 aggregated.byte_size()});
    node.model = aggregated;
    // Re-seeded weights invalidate the moment estimates.
    node.optimizer = make_optimizer(node.model.params(), cfg.optimizer,
                                    cfg.client_lr);
  }
}

void collect_and_average(FederationState& fs, const TrainingConfig& cfg,
                         comms::CommLedger& ledger, int round) {
  std::vector<const temporal::NodeModel*> models;
  std::vector<std::size_t> counts;
  for (NodeState& node : fs.nodes) {
    ledger.record(comms::Message{round, node.endpoint, "server",
                                 comms::Phase::fedavg_up,
                                 comms::PayloadKind::parameters,
                                 node.model.byte_size()});
    models.push_back(&node.model);
    counts.push_back(node.sample_count());
  }
  redistribute(fs, fedavg(models, counts), cfg, ledger, round);
}

double phase_client_updates(FederationState& fs, const TrainingConfig& cfg,
                            int round) {
  double loss = 0.0;
  for (NodeState& node : fs.nodes) {
    node.encodings_fresh = false;
    Rng rng = batch_rng(cfg, round, node.index);
    loss += client_update(node, cfg, rng);
  }
  return loss / static_cast<double>(fs.nodes.size());
}

double round_alternating(FederationState& fs, const TrainingConfig& cfg,
                         comms::CommLedger& ledger, int round, bool with_fedavg) {
  const double loss = phase_client_updates(fs, cfg, round);       // phase 1
  if (with_fedavg) collect_and_average(fs, cfg, ledger, round);
  for (NodeState& node : fs.nodes) {
    client_encode(node, cfg, ledger, round);                      // phase 2
  }
  server_train_gn(fs, cfg, ledger, round);                        // phase 3
  push_embeddings(fs, cfg, ledger, round);                        // phase 4
  return loss;
}

double round_fedavg_only(FederationState& fs, const TrainingConfig& cfg,
                         comms::CommLedger& ledger, int round) {
  const double loss = phase_client_updates(fs, cfg, round);
  collect_and_average(fs, cfg, ledger, round);
  return loss;
}

double round_local(FederationState& fs, const TrainingConfig& cfg, int round) {
  return phase_client_updates(fs, cfg, round);
}

double round_fmtl(FederationState& fs, const TrainingConfig& cfg,
                  const std::vector<std::vector<double>>& adjacency,
                  comms::CommLedger& ledger, int round) {
  // Weight exchange along every nonself directed edge, then regularized
  // local epochs against the exchanged snapshots.
  std::vector<std::vector<double>> snapshots;
  snapshots.reserve(fs.nodes.size());
  for (NodeState& node : fs.nodes) snapshots.push_back(temporal::flatten(node.model));
  for (std::size_t e = 0; e < fs.topology.n_edges(); ++e) {
    const std::size_t s = static_cast<std::size_t>(fs.topology.senders[e]);
    const std::size_t r = static_cast<std::size_t>(fs.topology.receivers[e]);
    if (s == r) continue;
    ledger.record(comms::Message{round, fs.nodes[s].endpoint, fs.nodes[r].endpoint,
                                 comms::Phase::fmtl_exchange,
                                 comms::PayloadKind::parameters,
                                 fs.nodes[s].model.byte_size()});
  }
  double loss = 0.0;
  for (NodeState& node : fs.nodes) {
    Rng rng = batch_rng(cfg, round, node.index);
    loss += client_update_fmtl(node, cfg, snapshots, adjacency, rng);
  }
  return loss / static_cast<double>(fs.nodes.size());
}

// One epoch of jointly trained batches: split learning (per-node models) or
// centralized (one shared model, no messages).
double round_joint(FederationState& fs, const TrainingConfig& cfg, bool shared,
                   bool record, comms::CommLedger& ledger, int round) {
  const std::size_t n = fs.nodes.size();
  const std::size_t h_enc = cfg.model.enc_hidden;
  const std::size_t h_gn = cfg.model.gn_embed;
  const std::size_t count = fs.nodes[0].sample_count();
  Rng rng = batch_rng(cfg, round, 0);
  const StepDims dims = step_dims(fs.nodes[0].shards->train, cfg);

  double sq_total = 0.0;
  std::size_t elems_total = 0;
  for (const std::vector<std::size_t>& idx :
       make_batches(count, cfg.batch_size, cfg.shuffle, rng)) {
    const std::size_t b = idx.size();
    if (!shared) {
      for (NodeState& node : fs.nodes) node.optimizer->zero_grad();
    }
    fs.server.gn_optimizer->zero_grad();

    // Encoder forwards; the tapes stay alive until gradients return.
    std::vector<std::unique_ptr<Tape>> enc_tapes;
    std::vector<Var> h_vars(n);
    Tensor h_all({b * n, h_enc});
    for (std::size_t i = 0; i < n; ++i) {
      enc_tapes.push_back(std::make_unique<Tape>());
      Tape& tape = *enc_tapes.back();
      temporal::NodeModel& model = shared ? fs.server.aggregated : fs.nodes[i].model;
      temporal::NodeModelVars vars = temporal::bind(tape, model);
      Var x = tape.constant(take_rows(fs.nodes[i].shards->train.x, idx));
      h_vars[i] = temporal::encode(tape, vars, x, dims.m);
      const Tensor& hv = tape.value(h_vars[i]);
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < h_enc; ++j) h_all.at(w * n + i, j) = hv.at(w, j);
      }
      if (record) {
        ledger.record(comms::Message{
            round, fs.nodes[i].endpoint, "server", comms::Phase::sl_forward,
            comms::PayloadKind::encoding,
            static_cast<std::uint64_t>(b * h_enc) * sizeof(double)});
      }
    }

    Tape gn_tape;
    spatial::GnVars gnv = spatial::bind(gn_tape, fs.server.gn);
    Var h_in = gn_tape.input(std::move(h_all));
    Var emb = spatial::gn_forward(gn_tape, gnv, h_in, fs.topology, b);
    const Tensor& emb_v = gn_tape.value(emb);

    // Decoder forwards + backwards; gradients w.r.t. the embeddings flow to
    // the server, gradients w.r.t. the encodings flow back locally.
    Tensor emb_seed({b * n, h_gn});
    std::vector<Tensor> enc_direct(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (record) {
        ledger.record(comms::Message{
            round, "server", fs.nodes[i].endpoint, comms::Phase::embed_down,
            comms::PayloadKind::embedding,
            static_cast<std::uint64_t>(b * h_gn) * sizeof(double)});
      }
      Tensor h_g_i({b, h_gn});
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < h_gn; ++j) h_g_i.at(w, j) = emb_v.at(w * n + i, j);
      }
      Tape tape;
      temporal::NodeModel& model = shared ? fs.server.aggregated : fs.nodes[i].model;
      temporal::NodeModelVars vars = temporal::bind(tape, model);
      Var hc = tape.input(enc_tapes[i]->value(h_vars[i]));
      Var hg = tape.input(std::move(h_g_i));
      Var state = num::concat_last({hc, hg});
      Var last = tape.constant(last_frame_of(fs.nodes[i].shards->train.x, dims, idx));
      Var y = tape.constant(take_rows(fs.nodes[i].shards->train.y, idx));
      Var pred = temporal::decode(tape, vars, last, state, dims.n_out);
      Var diff = num::sub(pred, y);
      Var sq = num::sum(num::mul(diff, diff));
      const double sqv =
          check_finite_loss(tape.value(sq)[0], fs.nodes[i].endpoint);
      const double batch_elems =
          static_cast<double>(b) * static_cast<double>(dims.n_out) *
          static_cast<double>(dims.d);
      tape.backward(sq, Tensor::scalar(1.0 / batch_elems));

      const Tensor ghg = tape.grad_tensor(hg);
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < h_gn; ++j) {
          emb_seed.at(w * n + i, j) = ghg.at(w, j);
        }
      }
      enc_direct[i] = tape.grad_tensor(hc);
      if (record) {
        ledger.record(comms::Message{
            round, fs.nodes[i].endpoint, "server", comms::Phase::grad_up,
            comms::PayloadKind::gradient,
            static_cast<std::uint64_t>(b * h_gn) * sizeof(double)});
      }
      sq_total += sqv;
      elems_total += static_cast<std::size_t>(batch_elems);
    }

    gn_tape.backward(emb, emb_seed);
    const Tensor gh_all = gn_tape.grad_tensor(h_in);
    for (std::size_t i = 0; i < n; ++i) {
      if (record) {
        ledger.record(comms::Message{
            round, "server", fs.nodes[i].endpoint, comms::Phase::sl_backward,
            comms::PayloadKind::gradient,
            static_cast<std::uint64_t>(b * h_enc) * sizeof(double)});
      }
      Tensor seed = enc_direct[i];
      for (std::size_t w = 0; w < b; ++w) {
        for (std::size_t j = 0; j < h_enc; ++j) {
          seed.at(w, j) += gh_all.at(w * n + i, j);
        }
      }
      enc_tapes[i]->backward(h_vars[i], seed);
    }

    if (!shared) {
      for (NodeState& node : fs.nodes) node.optimizer->step();
    }
    fs.server.gn_optimizer->step();
  }
  return sq_total / static_cast<double>(elems_total);
}

}  // namespace

// ---------------------------------------------------------------------------
// full runs
// ---------------------------------------------------------------------------

comms::CostParams RunResult::cost_params() const {
  comms::CostParams p;
  p.num_nodes = static_cast<double>(state->nodes.size());
  p.node_weights_bytes = static_cast<double>(state->nodes[0].model.byte_size());
  p.hidden_state_bytes =
      static_cast<double>(state->nodes[0].sample_count() * cfg.model.enc_hidden *
                          sizeof(double));
  p.server_rounds = static_cast<double>(cfg.server_rounds);
  p.rounds = static_cast<double>(rounds_run);
  std::size_t nonself = 0;
  for (std::size_t e = 0; e < state->topology.n_edges(); ++e) {
    if (state->topology.senders[e] != state->topology.receivers[e]) ++nonself;
  }
  p.nonself_directed_edges = static_cast<double>(nonself);
  return p;
}

FederationState init_federation(const TrainingConfig& cfg,
                                const data::WindowedDataset& dataset,
                                const graph::SensorGraph& g) {
  cfg.validate();
  if (dataset.n_nodes() != g.size()) {
    throw GraphConsistencyError("dataset has " + std::to_string(dataset.n_nodes()) +
                                " nodes, graph has " + std::to_string(g.size()));
  }
  FederationState fs;
  fs.topology = spatial::GnTopology::from_graph(g);

  Rng master(cfg.seed);
  Rng init_rng = master.fork(0);
  temporal::NodeModel init_model;
  init_model.init(cfg.model, init_rng);
  fs.server.gn.init(cfg.gn_config(), init_rng);
  fs.server.aggregated = init_model;
  fs.server.has_aggregated = true;
  fs.server.gn_optimizer =
      make_optimizer(fs.server.gn.params(), cfg.optimizer, cfg.server_lr);

  fs.nodes.resize(dataset.n_nodes());
  for (std::size_t i = 0; i < fs.nodes.size(); ++i) {
    NodeState& node = fs.nodes[i];
    node.index = i;
    node.endpoint = "node:" + std::to_string(i);
    node.model = init_model;
    node.optimizer =
        make_optimizer(node.model.params(), cfg.optimizer, cfg.client_lr);
    node.shards = &dataset.nodes[i];
    if (node.shards->train.count() == 0) {
      throw DegenerateInputError(node.endpoint + " has an empty training shard");
    }
  }
  return fs;
}

RunResult run_strategy(const TrainingConfig& cfg,
                       const data::WindowedDataset& dataset,
                       const graph::SensorGraph& g) {
  RunResult result;
  result.cfg = cfg;
  result.state =
      std::make_unique<FederationState>(init_federation(cfg, dataset, g));
  FederationState& fs = *result.state;

  if (cfg.strategy == Strategy::centralized) {
    // One optimizer over the shared model and the GN; pooled raw data is
    // recorded so the isolation audit can see what centralization costs.
    std::vector<Tensor*> params = fs.server.aggregated.params();
    for (Tensor* t : fs.server.gn.params()) params.push_back(t);
    fs.server.gn_optimizer =
        make_optimizer(std::move(params), cfg.optimizer, cfg.server_lr);
    for (NodeState& node : fs.nodes) {
      const std::uint64_t bytes =
          static_cast<std::uint64_t>(node.shards->train.x.numel() +
                                     node.shards->train.y.numel()) *
          sizeof(double);
      result.ledger.record(comms::Message{0, node.endpoint, "server",
                                          comms::Phase::raw_pool,
                                          comms::PayloadKind::raw_data, bytes});
    }
  }

  const std::vector<std::vector<double>>& adjacency = g.adjacency();
  auto eval_models = [&]() {
    std::vector<const temporal::NodeModel*> models;
    for (NodeState& node : fs.nodes) {
      models.push_back(cfg.strategy == Strategy::centralized
                           ? &fs.server.aggregated
                           : &node.model);
    }
    return models;
  };
  const spatial::GnParams* gn_for_eval =
      strategy_uses_gn(cfg.strategy) ? &fs.server.gn : nullptr;

  double best_val = std::numeric_limits<double>::infinity();
  int best_round = 0;
  for (int r = 1; r <= cfg.global_rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::map<comms::Phase, std::uint64_t> before =
        result.ledger.totals_by_phase();
    double train_loss = 0.0;
    try {
      switch (cfg.strategy) {
        case Strategy::at_fedavg:
          train_loss = round_alternating(fs, cfg, result.ledger, r, true);
          break;
        case Strategy::at_no_fedavg:
          train_loss = round_alternating(fs, cfg, result.ledger, r, false);
          break;
        case Strategy::fedavg_only:
          train_loss = round_fedavg_only(fs, cfg, result.ledger, r);
          break;
        case Strategy::local:
          train_loss = round_local(fs, cfg, r);
          break;
        case Strategy::fmtl:
          train_loss = round_fmtl(fs, cfg, adjacency, result.ledger, r);
          break;
        case Strategy::sl:
          train_loss = round_joint(fs, cfg, false, true, result.ledger, r);
          break;
        case Strategy::sl_fedavg:
          train_loss = round_joint(fs, cfg, false, true, result.ledger, r);
          collect_and_average(fs, cfg, result.ledger, r);
          break;
        case Strategy::centralized:
          train_loss = round_joint(fs, cfg, true, false, result.ledger, r);
          break;
      }
    } catch (const NumericError& e) {
      throw NumericError("round " + std::to_string(r) + ", strategy " +
                         to_string(cfg.strategy) + ": " + e.what());
    }

    RoundRecord rec;
    rec.round = r;
    rec.train_loss = train_loss;
    rec.val_rmse = evaluate_rmse(eval_models(), gn_for_eval, dataset, fs.topology,
                                 Split::val, cfg);
    const std::map<comms::Phase, std::uint64_t> after =
        result.ledger.totals_by_phase();
    for (const auto& [phase, total] : after) {
      const auto it = before.find(phase);
      rec.ledger_delta[phase] = total - (it == before.end() ? 0 : it->second);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.rounds.push_back(rec);
    result.rounds_run = r;
    fs.round = r;

    if (rec.val_rmse < best_val) {
      best_val = rec.val_rmse;
      best_round = r;
    } else if (cfg.patience > 0 && r - best_round >= cfg.patience) {
      break;
    }
  }

  result.final_val_rmse = result.rounds.back().val_rmse;
  result.final_test_rmse = evaluate_rmse(eval_models(), gn_for_eval, dataset,
                                         fs.topology, Split::test, cfg);
  return result;
}

bool isolation_ok(const comms::CommLedger& ledger) {
  return ledger.total_kind(comms::PayloadKind::raw_data) == 0;
}

}  // namespace fedst::fed
