#include "fedst/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>

namespace fedst::num {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

const Tensor& Var::value() const { return tape->value(*this); }
const Shape& Var::shape() const { return tape->value(*this).shape(); }
std::size_t Var::numel() const { return tape->value(*this).numel(); }

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) {
    throw ContractError("operands recorded on different tapes");
  }
}

void check_2d(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

std::size_t outer_count(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

Var Tape::emplace(Tensor value, bool needs_grad,
                  std::function<void(Tape&, const std::vector<double>&)> fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backward_fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor& t) {
  Var v = emplace(t, t.requires_grad(), nullptr);
  nodes_[v.id].bound = &t;
  return v;
}

Var Tape::constant(Tensor t) { return emplace(std::move(t), false, nullptr); }

Var Tape::input(Tensor t) { return emplace(std::move(t), true, nullptr); }

const Tensor& Tape::value(Var v) const { return nodes_.at(v.id).value; }

std::vector<double>& Tape::grad_buf(std::int32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

Tensor Tape::grad_tensor(Var v) const {
  const Node& n = nodes_.at(v.id);
  Tensor g(n.value.shape());
  if (!n.grad.empty()) g.values() = n.grad;
  return g;
}

void Tape::backward(Var loss) {
  if (!value(loss).is_scalar()) {
    throw ContractError(
        "backward without an explicit seed requires a scalar loss, got " +
        shape_str(value(loss).shape()));
  }
  grad_buf(loss.id)[0] = 1.0;
  sweep(loss.id);
}

void Tape::backward(Var at, const Tensor& seed) {
  const Tensor& v = value(at);
  if (!v.same_shape(seed)) {
    throw DimensionError("seed gradient shape " + shape_str(seed.shape()) +
                         " does not match tensor shape " + shape_str(v.shape()));
  }
  std::vector<double>& g = grad_buf(at.id);
  for (std::size_t i = 0; i < seed.numel(); ++i) g[i] += seed[i];
  sweep(at.id);
}

void Tape::backward(const std::vector<Seed>& seeds) {
  if (seeds.empty()) throw ContractError("backward called with no seeds");
  std::int32_t from = -1;
  for (const Seed& s : seeds) {
    const Tensor& v = value(s.at);
    if (!v.same_shape(s.grad)) {
      throw DimensionError("seed gradient shape " + shape_str(s.grad.shape()) +
                           " does not match tensor shape " +
                           shape_str(v.shape()));
    }
    std::vector<double>& g = grad_buf(s.at.id);
    for (std::size_t i = 0; i < s.grad.numel(); ++i) g[i] += s.grad[i];
    from = std::max(from, s.at.id);
  }
  sweep(from);
}

void Tape::sweep(std::int32_t from) {
  if (backward_done_) {
    throw ContractError("tape already consumed by a previous backward");
  }
  backward_done_ = true;
  for (std::int32_t id = from; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;  // nothing flowed into this node
    if (n.backward_fn) n.backward_fn(*this, n.grad);
    if (n.bound != nullptr && n.bound->requires_grad()) {
      n.bound->ensure_grad();
      std::vector<double>& dst = n.bound->grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_2d(av, "matmul");
  check_2d(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), k2 = bv.dim(0), n = bv.dim(1);
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
  }
  Tensor out({m, n});
  MMap(out.data(), m, n).noalias() = CMap(av.data(), m, k) * CMap(bv.data(), k, n);
  const bool ng = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, b, m, k, n](Tape& tp, const std::vector<double>& g) {
                     CMap gm(g.data(), m, n);
                     if (tp.node(a.id).needs_grad) {
                       CMap bm(tp.value(b).data(), k, n);
                       MMap(tp.grad_buf(a.id).data(), m, k).noalias() +=
                           gm * bm.transpose();
                     }
                     if (tp.node(b.id).needs_grad) {
                       CMap am(tp.value(a).data(), m, k);
                       MMap(tp.grad_buf(b.id).data(), k, n).noalias() +=
                           am.transpose() * gm;
                     }
                   });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const bool ng = t.node(a.id).needs_grad || t.node(b.id).needs_grad;

  if (av.same_shape(bv)) {
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return t.emplace(std::move(out), ng,
                     [a, b](Tape& tp, const std::vector<double>& g) {
                       if (tp.node(a.id).needs_grad) {
                         std::vector<double>& ga = tp.grad_buf(a.id);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (tp.node(b.id).needs_grad) {
                         std::vector<double>& gb = tp.grad_buf(b.id);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       }
                     });
  }

  // bias broadcast: a [m,n] + b [n]
  if (av.rank() == 2 && bv.rank() == 1 && av.dim(1) == bv.dim(0)) {
    const std::size_t m = av.dim(0), n = av.dim(1);
    Tensor out({m, n});
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) out.at(r, c) = av.at(r, c) + bv[c];
    }
    return t.emplace(std::move(out), ng,
                     [a, b, m, n](Tape& tp, const std::vector<double>& g) {
                       if (tp.node(a.id).needs_grad) {
                         std::vector<double>& ga = tp.grad_buf(a.id);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (tp.node(b.id).needs_grad) {
                         std::vector<double>& gb = tp.grad_buf(b.id);
                         for (std::size_t r = 0; r < m; ++r) {
                           for (std::size_t c = 0; c < n; ++c) {
                             gb[c] += g[r * n + c];
                           }
                         }
                       }
                     });
  }

  throw DimensionError("add: incompatible shapes " + shape_str(av.shape()) +
                       " vs " + shape_str(bv.shape()));
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw DimensionError("sub: incompatible shapes " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
  const bool ng = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, b](Tape& tp, const std::vector<double>& g) {
                     if (tp.node(a.id).needs_grad) {
                       std::vector<double>& ga = tp.grad_buf(a.id);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (tp.node(b.id).needs_grad) {
                       std::vector<double>& gb = tp.grad_buf(b.id);
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                     }
                   });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw DimensionError("mul: incompatible shapes " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const bool ng = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, b](Tape& tp, const std::vector<double>& g) {
                     const Tensor& av2 = tp.value(a);
                     const Tensor& bv2 = tp.value(b);
                     if (tp.node(a.id).needs_grad) {
                       std::vector<double>& ga = tp.grad_buf(a.id);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] += g[i] * bv2[i];
                       }
                     }
                     if (tp.node(b.id).needs_grad) {
                       std::vector<double>& gb = tp.grad_buf(b.id);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gb[i] += g[i] * av2[i];
                       }
                     }
                   });
}

namespace {

template <typename Fwd, typename Bwd>
Var unary_op(Var a, Fwd fwd, Bwd bwd) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i]);
  const bool ng = t.node(a.id).needs_grad;
  Var ov = t.emplace(std::move(out), ng, nullptr);
  t.node(ov.id).backward_fn = [a, ov, bwd](Tape& tp, const std::vector<double>& g) {
    if (!tp.node(a.id).needs_grad) return;
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(ov);
    std::vector<double>& ga = tp.grad_buf(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(x[i], y[i]);
  };
  return ov;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add_scalar(Var a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Var mul_scalar(Var a, double c) {
  return unary_op(
      a, [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

Var sub_from_scalar(double c, Var a) {
  return unary_op(
      a, [c](double x) { return c - x; },
      [](double, double) { return -1.0; });
}

Var sigmoid(Var a) {
  return unary_op(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_last of zero tensors");
  Tape& t = *parts[0].tape;
  const Shape& first = t.value(parts[0]).shape();
  std::size_t total_last = 0;
  bool ng = false;
  for (Var p : parts) {
    check_same_tape(parts[0], p);
    const Shape& s = t.value(p).shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw DimensionError("concat_last: leading dims differ, " +
                           shape_str(first) + " vs " + shape_str(s));
    }
    total_last += last_dim(s);
    ng = ng || t.node(p.id).needs_grad;
  }
  Shape out_shape = first;
  out_shape.back() = total_last;
  const std::size_t outer = outer_count(out_shape);
  Tensor out(out_shape);
  std::size_t col = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    const std::size_t w = last_dim(pv.shape());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < w; ++c) {
        out[o * total_last + col + c] = pv[o * w + c];
      }
    }
    col += w;
  }
  std::vector<Var> ps = parts;
  return t.emplace(std::move(out), ng,
                   [ps, outer, total_last](Tape& tp, const std::vector<double>& g) {
                     std::size_t col2 = 0;
                     for (Var p : ps) {
                       const std::size_t w = last_dim(tp.value(p).shape());
                       if (tp.node(p.id).needs_grad && w > 0) {
                         std::vector<double>& gp = tp.grad_buf(p.id);
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t c = 0; c < w; ++c) {
                             gp[o * w + c] += g[o * total_last + col2 + c];
                           }
                         }
                       }
                       col2 += w;
                     }
                   });
}

Var slice_last(Var a, std::size_t offset, std::size_t len) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const std::size_t w = last_dim(av.shape());
  if (offset + len > w) {
    throw DimensionError("slice_last [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ") out of range for " +
                         shape_str(av.shape()));
  }
  Shape out_shape = av.shape();
  out_shape.back() = len;
  const std::size_t outer = outer_count(out_shape);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < len; ++c) out[o * len + c] = av[o * w + offset + c];
  }
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, offset, len, w, outer](Tape& tp, const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t c = 0; c < len; ++c) {
                         ga[o * w + offset + c] += g[o * len + c];
                       }
                     }
                   });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(Tensor::scalar(s), ng,
                   [a](Tape& tp, const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (double& v : ga) v += g[0];
                   });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.numel() == 0) throw ContractError("mean of an empty tensor");
  const double inv = 1.0 / static_cast<double>(av.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(Tensor::scalar(s * inv), ng,
                   [a, inv](Tape& tp, const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (double& v : ga) v += g[0] * inv;
                   });
}

Var gather_rows(Var a, std::vector<std::int64_t> rows) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  check_2d(av, "gather_rows");
  const std::size_t r_in = av.dim(0), c = av.dim(1);
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::int64_t src = rows[i];
    if (src < 0 || static_cast<std::size_t>(src) >= r_in) {
      throw GraphConsistencyError("gather_rows: index " + std::to_string(src) +
                                  " out of range for " + shape_str(av.shape()));
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[src * c + j];
  }
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, rows = std::move(rows), c](Tape& tp,
                                                  const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         ga[rows[i] * c + j] += g[i * c + j];
                       }
                     }
                   });
}

Var scatter_sum_rows(Var a, std::vector<std::int64_t> target_rows,
                     std::size_t n_out) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  check_2d(av, "scatter_sum_rows");
  const std::size_t r_in = av.dim(0), c = av.dim(1);
  if (target_rows.size() != r_in) {
    throw DimensionError("scatter_sum_rows: " + std::to_string(target_rows.size()) +
                         " targets for " + std::to_string(r_in) + " rows");
  }
  Tensor out({n_out, c});
  for (std::size_t i = 0; i < r_in; ++i) {
    const std::int64_t dst = target_rows[i];
    if (dst < 0 || static_cast<std::size_t>(dst) >= n_out) {
      throw GraphConsistencyError("scatter_sum_rows: index " + std::to_string(dst) +
                                  " out of range for " + std::to_string(n_out) +
                                  " rows");
    }
    for (std::size_t j = 0; j < c; ++j) out[dst * c + j] += av[i * c + j];
  }
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, rows = std::move(target_rows), c](
                       Tape& tp, const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         ga[i * c + j] += g[rows[i] * c + j];
                       }
                     }
                   });
}

Var segment_sum_sorted(Var a, std::vector<std::int64_t> segments,
                       std::size_t n_segments) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  check_2d(av, "segment_sum_sorted");
  const std::size_t r_in = av.dim(0), c = av.dim(1);
  if (segments.size() != r_in) {
    throw DimensionError("segment_sum_sorted: " + std::to_string(segments.size()) +
                         " segment ids for " + std::to_string(r_in) + " rows");
  }
  std::vector<std::vector<std::int64_t>> members(n_segments);
  for (std::size_t i = 0; i < r_in; ++i) {
    const std::int64_t s = segments[i];
    if (s < 0 || static_cast<std::size_t>(s) >= n_segments) {
      throw GraphConsistencyError("segment_sum_sorted: segment " +
                                  std::to_string(s) + " out of range");
    }
    members[s].push_back(static_cast<std::int64_t>(i));
  }
  Tensor out({n_segments, c});
  std::vector<double> column;
  for (std::size_t s = 0; s < n_segments; ++s) {
    for (std::size_t j = 0; j < c; ++j) {
      column.clear();
      for (std::int64_t row : members[s]) column.push_back(av[row * c + j]);
      std::sort(column.begin(), column.end());
      double acc = 0.0;
      for (double v : column) acc += v;
      out[s * c + j] = acc;
    }
  }
  const bool ng = t.node(a.id).needs_grad;
  return t.emplace(std::move(out), ng,
                   [a, segments = std::move(segments), c](
                       Tape& tp, const std::vector<double>& g) {
                     if (!tp.node(a.id).needs_grad) return;
                     std::vector<double>& ga = tp.grad_buf(a.id);
                     for (std::size_t i = 0; i < segments.size(); ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         ga[i * c + j] += g[segments[i] * c + j];
                       }
                     }
                   });
}

}  // namespace fedst::num
