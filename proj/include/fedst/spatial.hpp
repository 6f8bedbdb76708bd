#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedst/graph.hpp"
#include "fedst/rng.hpp"
#include "fedst/tape.hpp"

namespace fedst::spatial {

// MLP with ReLU hidden activations and a linear output layer.
struct MlpParams {
  std::vector<num::Tensor> weights;  // layer i: [in_i, out_i]
  std::vector<num::Tensor> biases;

  void init(const std::vector<std::size_t>& sizes, Rng& rng);
  std::size_t in_dim() const { return weights.front().dim(0); }
  std::size_t out_dim() const { return weights.back().dim(1); }
};

struct MlpVars {
  std::vector<num::Var> weights, biases;
};

MlpVars bind(num::Tape& tape, MlpParams& p);
MlpVars bind_const(num::Tape& tape, const MlpParams& p);
num::Var mlp_forward(const MlpVars& m, num::Var x);

// Feature widths flowing through one GN layer. Update-function input widths
// follow from them: phi_e reads (edge, receiver, sender, global), phi_v
// reads (aggregated edge, node, global), phi_u reads (aggregated edge,
// aggregated node, global).
struct GnWidths {
  std::size_t edge_in = 0, node_in = 0, global_in = 0;
  std::size_t edge_out = 0, node_out = 0, global_out = 0;

  std::size_t phi_e_in() const { return edge_in + 2 * node_in + global_in; }
  std::size_t phi_v_in() const { return edge_out + node_in + global_in; }
  std::size_t phi_u_in() const { return edge_out + node_out + global_in; }
};

struct GnLayerParams {
  GnWidths widths;
  MlpParams phi_e, phi_v, phi_u;
  // Learned adapter for the node residual when in/out widths differ;
  // identity otherwise (empty tensor).
  num::Tensor node_adapter;  // [node_in, node_out] or empty

  void init(const GnWidths& w, const std::vector<std::size_t>& mlp_hidden, Rng& rng);
};

// Edge topology in the layout the batched forward consumes. Features for B
// windows are stacked as [B*N, width] with window b's node i at row b*N+i.
struct GnTopology {
  std::size_t n_nodes = 0;
  std::vector<std::int64_t> senders;    // per edge
  std::vector<std::int64_t> receivers;  // per edge
  std::vector<double> edge_weights;

  std::size_t n_edges() const { return senders.size(); }
  static GnTopology from_graph(const graph::SensorGraph& g);
};

struct GraphFeatures {
  num::Var nodes;   // [B*N, Wv]
  num::Var edges;   // [B*K, We]
  num::Var global;  // [B, Wu] (Wu may be 0)
};

// Injectable update functions; production binds them to the layer MLPs,
// tests may substitute hand-computable stubs.
struct UpdateFns {
  std::function<num::Var(num::Var)> edge, node, global;
};

// One synchronous GN layer pass: all edge updates read the layer-input node
// features, then per-receiver aggregation, node updates, and finally the
// global update. Aggregations are sums; empty sets yield zero vectors.
GraphFeatures gn_layer(num::Tape& tape, const GraphFeatures& in,
                       const GnTopology& topo, std::size_t batch,
                       const UpdateFns& fns);

// Two GN layers with a per-layer residual on node features. Other
// configurations are possible via the pieces above; this is the production
// stack.
struct GnConfig {
  std::size_t node_in = 64;      // width of the uploaded encodings
  std::size_t embed = 64;        // node embedding width handed back to nodes
  std::vector<std::size_t> mlp_hidden = {256, 256, 128};
};

struct GnParams {
  GnConfig cfg;
  GnLayerParams layer1, layer2;

  void init(const GnConfig& config, Rng& rng);
  std::vector<std::pair<std::string, num::Tensor*>> named_params();
  std::vector<std::pair<std::string, const num::Tensor*>> named_params() const;
  std::vector<num::Tensor*> params();
  std::size_t param_count() const;
  std::uint64_t byte_size() const;
};

struct GnVars {
  MlpVars phi_e1, phi_v1, phi_u1, phi_e2, phi_v2, phi_u2;
  num::Var adapter1, adapter2;  // invalid when the residual is identity
  const GnParams* params = nullptr;
};

GnVars bind(num::Tape& tape, GnParams& p);
GnVars bind_const(num::Tape& tape, const GnParams& p);

// Batched forward: h_nodes [B*N, node_in] -> embeddings [B*N, embed].
// Initial edge features are the adjacency weights, the initial global
// feature is the empty vector.
num::Var gn_forward(num::Tape& tape, const GnVars& gn, num::Var h_nodes,
                    const GnTopology& topo, std::size_t batch);

// Single-sample convenience: h_all [N, node_in] -> [N, embed].
num::Var gn_forward(num::Tape& tape, const GnVars& gn, num::Var h_all,
                    const GnTopology& topo);

}  // namespace fedst::spatial
