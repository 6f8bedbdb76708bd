#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedst/rng.hpp"
#include "fedst/tape.hpp"
#include "fedst/tensor.hpp"

namespace fedst::temporal {

// Single GRU cell, gates stored fused as [r | z | n]:
//   r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//   z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//   n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//   h' = (1 - z) * n + z * h
struct GruCellParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  num::Tensor w_ih;  // [input_dim, 3H]
  num::Tensor w_hh;  // [H, 3H]
  num::Tensor b_ih;  // [3H]
  num::Tensor b_hh;  // [3H]

  void init(std::size_t in_dim, std::size_t hid_dim, Rng& rng);
};

struct GruCellVars {
  num::Var w_ih, w_hh, b_ih, b_hh;
  std::size_t hidden_dim = 0;
};

GruCellVars bind(num::Tape& tape, GruCellParams& p);
GruCellVars bind_const(num::Tape& tape, const GruCellParams& p);

// One recurrence step: x [B, in], h [B, H] -> h' [B, H].
num::Var gru_step(const GruCellVars& cell, num::Var x, num::Var h);

struct ModelConfig {
  std::size_t input_dim = 1;    // D
  std::size_t enc_hidden = 64;  // H_enc
  std::size_t gn_embed = 64;    // width of the server-provided embedding
  std::size_t num_layers = 1;   // 1 or 2

  std::size_t dec_hidden() const { return enc_hidden + gn_embed; }
};

// Per-node encoder-decoder. The decoder's hidden width is the encoder width
// plus the graph-embedding width because its initial state is their
// concatenation; a final affine projection maps hidden back to input dim.
struct NodeModel {
  ModelConfig cfg;
  std::vector<GruCellParams> encoder;
  std::vector<GruCellParams> decoder;
  num::Tensor w_out;  // [dec_hidden, D]
  num::Tensor b_out;  // [D]

  void init(const ModelConfig& config, Rng& rng);

  // Fixed ordering; this is also the checkpoint and flatten order.
  std::vector<std::pair<std::string, num::Tensor*>> named_params();
  std::vector<std::pair<std::string, const num::Tensor*>> named_params() const;
  std::vector<num::Tensor*> params();
  std::size_t param_count() const;
  std::uint64_t byte_size() const;  // param_count * sizeof(double)
};

struct NodeModelVars {
  std::vector<GruCellVars> encoder;
  std::vector<GruCellVars> decoder;
  num::Var w_out, b_out;
  ModelConfig cfg;
};

NodeModelVars bind(num::Tape& tape, NodeModel& m);
NodeModelVars bind_const(num::Tape& tape, const NodeModel& m);

// Runs the encoder over an m-step input batch stored as [B, m*D]
// (time-major within each row) from a zero initial state; returns the final
// top-layer hidden state [B, H_enc].
num::Var encode(num::Tape& tape, const NodeModelVars& m, num::Var x,
                std::size_t n_steps);

// Autoregressive decode: step 1 consumes the last input frame, later steps
// consume the previous projected output. `state` [B, dec_hidden] seeds the
// hidden state of every decoder layer. Returns predictions [B, n*D].
num::Var decode(num::Tape& tape, const NodeModelVars& m, num::Var last_frame,
                num::Var state, std::size_t n_steps);

// Mean squared error over all elements.
num::Var node_loss(num::Var pred, num::Var target);

// Flatten / unflatten in named_params order (fedavg, FMTL, checkpoints).
std::vector<double> flatten(const NodeModel& m);
void unflatten(NodeModel& m, const std::vector<double>& flat);

}  // namespace fedst::temporal
