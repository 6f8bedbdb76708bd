#include "fedst/temporal.hpp"

#include <cmath>

namespace fedst::temporal {

using num::Tape;
using num::Tensor;
using num::Var;

void GruCellParams::init(std::size_t in_dim, std::size_t hid_dim, Rng& rng) {
  input_dim = in_dim;
  hidden_dim = hid_dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hid_dim));
  auto fill = [&](Tensor& t, num::Shape shape) {
    t = Tensor(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    t.set_requires_grad(true);
  };
  fill(w_ih, {in_dim, 3 * hid_dim});
  fill(w_hh, {hid_dim, 3 * hid_dim});
  fill(b_ih, {3 * hid_dim});
  fill(b_hh, {3 * hid_dim});
}

GruCellVars bind(Tape& tape, GruCellParams& p) {
  return GruCellVars{tape.leaf(p.w_ih), tape.leaf(p.w_hh), tape.leaf(p.b_ih),
                     tape.leaf(p.b_hh), p.hidden_dim};
}

GruCellVars bind_const(Tape& tape, const GruCellParams& p) {
  return GruCellVars{tape.constant(p.w_ih), tape.constant(p.w_hh),
                     tape.constant(p.b_ih), tape.constant(p.b_hh), p.hidden_dim};
}

Var gru_step(const GruCellVars& cell, Var x, Var h) {
  const std::size_t hd = cell.hidden_dim;
  Var gi = add(matmul(x, cell.w_ih), cell.b_ih);  // [B, 3H]
  Var gh = add(matmul(h, cell.w_hh), cell.b_hh);
  Var r = sigmoid(add(slice_last(gi, 0, hd), slice_last(gh, 0, hd)));
  Var z = sigmoid(add(slice_last(gi, hd, hd), slice_last(gh, hd, hd)));
  Var n = num::tanh(
      add(slice_last(gi, 2 * hd, hd), mul(r, slice_last(gh, 2 * hd, hd))));
  return add(mul(sub_from_scalar(1.0, z), n), mul(z, h));
}

void NodeModel::init(const ModelConfig& config, Rng& rng) {
  if (config.num_layers < 1 || config.num_layers > 2) {
    throw ContractError("node model supports 1 or 2 GRU layers, got " +
                        std::to_string(config.num_layers));
  }
  cfg = config;
  encoder.assign(cfg.num_layers, GruCellParams{});
  decoder.assign(cfg.num_layers, GruCellParams{});
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    encoder[l].init(l == 0 ? cfg.input_dim : cfg.enc_hidden, cfg.enc_hidden, rng);
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    decoder[l].init(l == 0 ? cfg.input_dim : cfg.dec_hidden(), cfg.dec_hidden(), rng);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.dec_hidden()));
  w_out = Tensor({cfg.dec_hidden(), cfg.input_dim});
  b_out = Tensor({cfg.input_dim});
  for (std::size_t i = 0; i < w_out.numel(); ++i) {
    w_out[i] = rng.uniform(-bound, bound);
  }
  for (std::size_t i = 0; i < b_out.numel(); ++i) {
    b_out[i] = rng.uniform(-bound, bound);
  }
  w_out.set_requires_grad(true);
  b_out.set_requires_grad(true);
}

namespace {

template <typename Model, typename TensorPtr>
std::vector<std::pair<std::string, TensorPtr>> named_params_impl(Model& m) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  for (std::size_t l = 0; l < m.encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    out.emplace_back(p + "w_ih", &m.encoder[l].w_ih);
    out.emplace_back(p + "w_hh", &m.encoder[l].w_hh);
    out.emplace_back(p + "b_ih", &m.encoder[l].b_ih);
    out.emplace_back(p + "b_hh", &m.encoder[l].b_hh);
  }
  for (std::size_t l = 0; l < m.decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    out.emplace_back(p + "w_ih", &m.decoder[l].w_ih);
    out.emplace_back(p + "w_hh", &m.decoder[l].w_hh);
    out.emplace_back(p + "b_ih", &m.decoder[l].b_ih);
    out.emplace_back(p + "b_hh", &m.decoder[l].b_hh);
  }
  out.emplace_back("out.w", &m.w_out);
  out.emplace_back("out.b", &m.b_out);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> NodeModel::named_params() {
  return named_params_impl<NodeModel, Tensor*>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> NodeModel::named_params() const {
  return named_params_impl<const NodeModel, const Tensor*>(*this);
}

std::vector<Tensor*> NodeModel::params() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t NodeModel::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_params()) n += t->numel();
  return n;
}

std::uint64_t NodeModel::byte_size() const {
  return static_cast<std::uint64_t>(param_count()) * sizeof(double);
}

NodeModelVars bind(Tape& tape, NodeModel& m) {
  NodeModelVars v;
  v.cfg = m.cfg;
  for (GruCellParams& c : m.encoder) v.encoder.push_back(bind(tape, c));
  for (GruCellParams& c : m.decoder) v.decoder.push_back(bind(tape, c));
  v.w_out = tape.leaf(m.w_out);
  v.b_out = tape.leaf(m.b_out);
  return v;
}

NodeModelVars bind_const(Tape& tape, const NodeModel& m) {
  NodeModelVars v;
  v.cfg = m.cfg;
  for (const GruCellParams& c : m.encoder) v.encoder.push_back(bind_const(tape, c));
  for (const GruCellParams& c : m.decoder) v.decoder.push_back(bind_const(tape, c));
  v.w_out = tape.constant(m.w_out);
  v.b_out = tape.constant(m.b_out);
  return v;
}

Var encode(Tape& tape, const NodeModelVars& m, Var x, std::size_t n_steps) {
  const Tensor& xv = tape.value(x);
  if (!xv.all_finite()) {
    throw ContractError("encode input contains non-finite values");
  }
  const std::size_t d = m.cfg.input_dim;
  if (xv.rank() != 2 || xv.dim(1) != n_steps * d) {
    throw DimensionError("encode expects [B," + std::to_string(n_steps * d) +
                         "], got " + num::shape_str(xv.shape()));
  }
  const std::size_t batch = xv.dim(0);
  std::vector<Var> hidden(m.encoder.size());
  for (std::size_t l = 0; l < m.encoder.size(); ++l) {
    hidden[l] = tape.constant(Tensor({batch, m.cfg.enc_hidden}));
  }
  for (std::size_t t = 0; t < n_steps; ++t) {
    Var frame = slice_last(x, t * d, d);
    for (std::size_t l = 0; l < m.encoder.size(); ++l) {
      hidden[l] = gru_step(m.encoder[l], l == 0 ? frame : hidden[l - 1], hidden[l]);
    }
  }
  return hidden.back();
}

Var decode(Tape& tape, const NodeModelVars& m, Var last_frame, Var state,
           std::size_t n_steps) {
  const Tensor& sv = tape.value(state);
  if (sv.rank() != 2 || sv.dim(1) != m.cfg.dec_hidden()) {
    throw DimensionError("decoder state must be [B," +
                         std::to_string(m.cfg.dec_hidden()) + "], got " +
                         num::shape_str(sv.shape()));
  }
  std::vector<Var> hidden(m.decoder.size(), state);
  Var frame = last_frame;
  std::vector<Var> outputs;
  outputs.reserve(n_steps);
  for (std::size_t t = 0; t < n_steps; ++t) {
    for (std::size_t l = 0; l < m.decoder.size(); ++l) {
      hidden[l] = gru_step(m.decoder[l], l == 0 ? frame : hidden[l - 1], hidden[l]);
    }
    Var proj = add(matmul(hidden.back(), m.w_out), m.b_out);  // [B, D]
    outputs.push_back(proj);
    frame = proj;
  }
  return outputs.size() == 1 ? outputs[0] : concat_last(outputs);
}

Var node_loss(Var pred, Var target) {
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  if (!pv.same_shape(tv)) {
    throw DimensionError("loss shapes differ: " + num::shape_str(pv.shape()) +
                         " vs " + num::shape_str(tv.shape()));
  }
  Var diff = sub(pred, target);
  return mean(mul(diff, diff));
}

std::vector<double> flatten(const NodeModel& m) {
  std::vector<double> flat;
  for (const auto& [name, t] : m.named_params()) {
    flat.insert(flat.end(), t->values().begin(), t->values().end());
  }
  return flat;
}

void unflatten(NodeModel& m, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& [name, t] : m.named_params()) {
    if (off + t->numel() > flat.size()) {
      throw DimensionError("flat parameter vector too short for model");
    }
    std::copy(flat.begin() + off, flat.begin() + off + t->numel(),
              t->values().begin());
    off += t->numel();
  }
  if (off != flat.size()) {
    throw DimensionError("flat parameter vector length " +
                         std::to_string(flat.size()) + " does not match model (" +
                         std::to_string(off) + ")");
  }
}

}  // namespace fedst::temporal
