#include "fedst/spatial.hpp"

#include <cmath>

namespace fedst::spatial {

using num::Tape;
using num::Tensor;
using num::Var;

void MlpParams::init(const std::vector<std::size_t>& sizes, Rng& rng) {
  if (sizes.size() < 2) throw ContractError("MLP needs at least in/out sizes");
  weights.clear();
  biases.clear();
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[i]));
    Tensor w({sizes[i], sizes[i + 1]});
    Tensor b({sizes[i + 1]});
    for (std::size_t k = 0; k < w.numel(); ++k) w[k] = rng.uniform(-bound, bound);
    for (std::size_t k = 0; k < b.numel(); ++k) b[k] = rng.uniform(-bound, bound);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    weights.push_back(std::move(w));
    biases.push_back(std::move(b));
  }
}

MlpVars bind(Tape& tape, MlpParams& p) {
  MlpVars v;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    v.weights.push_back(tape.leaf(p.weights[i]));
    v.biases.push_back(tape.leaf(p.biases[i]));
  }
  return v;
}

MlpVars bind_const(Tape& tape, const MlpParams& p) {
  MlpVars v;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    v.weights.push_back(tape.constant(p.weights[i]));
    v.biases.push_back(tape.constant(p.biases[i]));
  }
  return v;
}

Var mlp_forward(const MlpVars& m, Var x) {
  Var h = x;
  for (std::size_t i = 0; i < m.weights.size(); ++i) {
    h = add(matmul(h, m.weights[i]), m.biases[i]);
    if (i + 1 < m.weights.size()) h = relu(h);
  }
  return h;
}

void GnLayerParams::init(const GnWidths& w, const std::vector<std::size_t>& mlp_hidden,
                         Rng& rng) {
  widths = w;
  auto sizes = [&](std::size_t in, std::size_t out) {
    std::vector<std::size_t> s;
    s.push_back(in);
    s.insert(s.end(), mlp_hidden.begin(), mlp_hidden.end());
    s.push_back(out);
    return s;
  };
  phi_e.init(sizes(w.phi_e_in(), w.edge_out), rng);
  phi_v.init(sizes(w.phi_v_in(), w.node_out), rng);
  phi_u.init(sizes(w.phi_u_in(), w.global_out), rng);
  if (w.node_in != w.node_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.node_in));
    node_adapter = Tensor({w.node_in, w.node_out});
    for (std::size_t k = 0; k < node_adapter.numel(); ++k) {
      node_adapter[k] = rng.uniform(-bound, bound);
    }
    node_adapter.set_requires_grad(true);
  } else {
    node_adapter = Tensor();
  }
}

GnTopology GnTopology::from_graph(const graph::SensorGraph& g) {
  GnTopology t;
  t.n_nodes = g.size();
  for (const graph::Edge& e : g.edges()) {
    t.senders.push_back(static_cast<std::int64_t>(e.sender));
    t.receivers.push_back(static_cast<std::int64_t>(e.receiver));
    t.edge_weights.push_back(e.weight);
  }
  return t;
}

GraphFeatures gn_layer(Tape& tape, const GraphFeatures& in, const GnTopology& topo,
                       std::size_t batch, const UpdateFns& fns) {
  const std::size_t n = topo.n_nodes;
  const std::size_t k = topo.n_edges();
  const Tensor& nv = tape.value(in.nodes);
  if (nv.dim(0) != batch * n) {
    throw GraphConsistencyError(
        "node feature rows " + std::to_string(nv.dim(0)) + " do not match " +
        std::to_string(batch) + " windows of " + std::to_string(n) + " nodes");
  }

  // Row indices for the batched gather/scatter.
  std::vector<std::int64_t> send_rows(batch * k), recv_rows(batch * k);
  std::vector<std::int64_t> edge_window(batch * k), node_window(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t e = 0; e < k; ++e) {
      send_rows[b * k + e] = static_cast<std::int64_t>(b * n) + topo.senders[e];
      recv_rows[b * k + e] = static_cast<std::int64_t>(b * n) + topo.receivers[e];
      edge_window[b * k + e] = static_cast<std::int64_t>(b);
    }
    for (std::size_t i = 0; i < n; ++i) {
      node_window[b * n + i] = static_cast<std::int64_t>(b);
    }
  }

  const bool has_global = tape.value(in.global).numel() > 0;

  // Edge update reads the layer-input node features (synchronous semantics).
  std::vector<Var> e_parts{in.edges, gather_rows(in.nodes, recv_rows),
                           gather_rows(in.nodes, send_rows)};
  if (has_global) e_parts.push_back(gather_rows(in.global, edge_window));
  Var edges_out = fns.edge(concat_last(e_parts));  // [B*K, edge_out]

  // Receiver-indexed aggregation; nodes without incoming edges get zeros.
  Var agg_e_per_node = scatter_sum_rows(edges_out, recv_rows, batch * n);

  std::vector<Var> v_parts{agg_e_per_node, in.nodes};
  if (has_global) v_parts.push_back(gather_rows(in.global, node_window));
  Var nodes_out = fns.node(concat_last(v_parts));  // [B*N, node_out]

  // Global update: edge sum in edge order, node sum in value-sorted order so
  // the result is invariant to node relabeling at the bit level.
  Var agg_e_global = scatter_sum_rows(edges_out, edge_window, batch);
  Var agg_v_global = segment_sum_sorted(nodes_out, node_window, batch);
  std::vector<Var> u_parts{agg_e_global, agg_v_global};
  if (has_global) u_parts.push_back(in.global);
  Var global_out = fns.global(concat_last(u_parts));  // [B, global_out]

  return GraphFeatures{nodes_out, edges_out, global_out};
}

void GnParams::init(const GnConfig& config, Rng& rng) {
  cfg = config;
  GnWidths w1;
  w1.edge_in = 1;
  w1.node_in = cfg.node_in;
  w1.global_in = 0;
  w1.edge_out = cfg.embed;
  w1.node_out = cfg.embed;
  w1.global_out = cfg.embed;
  layer1.init(w1, cfg.mlp_hidden, rng);

  GnWidths w2;
  w2.edge_in = cfg.embed;
  w2.node_in = cfg.embed;
  w2.global_in = cfg.embed;
  w2.edge_out = cfg.embed;
  w2.node_out = cfg.embed;
  w2.global_out = cfg.embed;
  layer2.init(w2, cfg.mlp_hidden, rng);
}

namespace {

template <typename TensorPtr, typename Mlp>
void collect_mlp(std::vector<std::pair<std::string, TensorPtr>>& out,
                 const std::string& prefix, Mlp& mlp) {
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    out.emplace_back(prefix + ".w" + std::to_string(i), &mlp.weights[i]);
    out.emplace_back(prefix + ".b" + std::to_string(i), &mlp.biases[i]);
  }
}

template <typename Params, typename TensorPtr>
std::vector<std::pair<std::string, TensorPtr>> gn_named_params(Params& p) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  collect_mlp<TensorPtr>(out, "layer1.phi_e", p.layer1.phi_e);
  collect_mlp<TensorPtr>(out, "layer1.phi_v", p.layer1.phi_v);
  collect_mlp<TensorPtr>(out, "layer1.phi_u", p.layer1.phi_u);
  if (p.layer1.node_adapter.numel() > 0) {
    out.emplace_back("layer1.adapter", &p.layer1.node_adapter);
  }
  collect_mlp<TensorPtr>(out, "layer2.phi_e", p.layer2.phi_e);
  collect_mlp<TensorPtr>(out, "layer2.phi_v", p.layer2.phi_v);
  collect_mlp<TensorPtr>(out, "layer2.phi_u", p.layer2.phi_u);
  if (p.layer2.node_adapter.numel() > 0) {
    out.emplace_back("layer2.adapter", &p.layer2.node_adapter);
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> GnParams::named_params() {
  return gn_named_params<GnParams, Tensor*>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> GnParams::named_params() const {
  return gn_named_params<const GnParams, const Tensor*>(*this);
}

std::vector<Tensor*> GnParams::params() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t GnParams::param_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : named_params()) total += t->numel();
  return total;
}

std::uint64_t GnParams::byte_size() const {
  return static_cast<std::uint64_t>(param_count()) * sizeof(double);
}

GnVars bind(Tape& tape, GnParams& p) {
  GnVars v;
  v.params = &p;
  v.phi_e1 = bind(tape, p.layer1.phi_e);
  v.phi_v1 = bind(tape, p.layer1.phi_v);
  v.phi_u1 = bind(tape, p.layer1.phi_u);
  v.phi_e2 = bind(tape, p.layer2.phi_e);
  v.phi_v2 = bind(tape, p.layer2.phi_v);
  v.phi_u2 = bind(tape, p.layer2.phi_u);
  if (p.layer1.node_adapter.numel() > 0) v.adapter1 = tape.leaf(p.layer1.node_adapter);
  if (p.layer2.node_adapter.numel() > 0) v.adapter2 = tape.leaf(p.layer2.node_adapter);
  return v;
}

GnVars bind_const(Tape& tape, const GnParams& p) {
  GnVars v;
  v.params = &p;
  v.phi_e1 = bind_const(tape, p.layer1.phi_e);
  v.phi_v1 = bind_const(tape, p.layer1.phi_v);
  v.phi_u1 = bind_const(tape, p.layer1.phi_u);
  v.phi_e2 = bind_const(tape, p.layer2.phi_e);
  v.phi_v2 = bind_const(tape, p.layer2.phi_v);
  v.phi_u2 = bind_const(tape, p.layer2.phi_u);
  if (p.layer1.node_adapter.numel() > 0) {
    v.adapter1 = tape.constant(p.layer1.node_adapter);
  }
  if (p.layer2.node_adapter.numel() > 0) {
    v.adapter2 = tape.constant(p.layer2.node_adapter);
  }
  return v;
}

namespace {

Var residual_nodes(Var layer_out, Var layer_in, Var adapter) {
  if (adapter.tape == nullptr) return add(layer_out, layer_in);
  return add(layer_out, matmul(layer_in, adapter));
}

}  // namespace

Var gn_forward(Tape& tape, const GnVars& gn, Var h_nodes, const GnTopology& topo,
               std::size_t batch) {
  const GnParams& p = *gn.params;
  const Tensor& hv = tape.value(h_nodes);
  if (hv.rank() != 2 || hv.dim(0) != batch * topo.n_nodes ||
      hv.dim(1) != p.cfg.node_in) {
    throw GraphConsistencyError(
        "gn_forward features " + num::shape_str(hv.shape()) + " do not match " +
        std::to_string(batch) + " windows x " + std::to_string(topo.n_nodes) +
        " nodes x width " + std::to_string(p.cfg.node_in));
  }

  // Initial edge features are the adjacency weights; the initial global
  // feature is the empty vector.
  const std::size_t k = topo.n_edges();
  Tensor edge0({batch * k, 1});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t e = 0; e < k; ++e) edge0[b * k + e] = topo.edge_weights[e];
  }
  GraphFeatures f0{h_nodes, tape.constant(std::move(edge0)),
                   tape.constant(Tensor({batch, 0}))};

  UpdateFns fns1{
      [&](Var x) { return mlp_forward(gn.phi_e1, x); },
      [&](Var x) { return mlp_forward(gn.phi_v1, x); },
      [&](Var x) { return mlp_forward(gn.phi_u1, x); },
  };
  GraphFeatures f1 = gn_layer(tape, f0, topo, batch, fns1);
  f1.nodes = residual_nodes(f1.nodes, f0.nodes, gn.adapter1);

  UpdateFns fns2{
      [&](Var x) { return mlp_forward(gn.phi_e2, x); },
      [&](Var x) { return mlp_forward(gn.phi_v2, x); },
      [&](Var x) { return mlp_forward(gn.phi_u2, x); },
  };
  GraphFeatures f2 = gn_layer(tape, f1, topo, batch, fns2);
  f2.nodes = residual_nodes(f2.nodes, f1.nodes, gn.adapter2);
  return f2.nodes;
}

Var gn_forward(Tape& tape, const GnVars& gn, Var h_all, const GnTopology& topo) {
  return gn_forward(tape, gn, h_all, topo, 1);
}

}  // namespace fedst::spatial
