#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fedst/tensor.hpp"

namespace fedst::num {

class Tape;

// Lightweight handle to a tensor recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t numel() const;
};

// Reverse-mode computation graph. Operations are recorded in execution
// order, which is topological by construction; backward replays them once
// in reverse recording order. A tape supports exactly one backward call.
// Tapes are single-threaded values: movable between threads, never shared.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to an external tensor. When the tensor requires grad,
  // backward accumulates into its grad buffer.
  Var leaf(Tensor& t);
  // Owned constant; gradients do not flow into it.
  Var constant(Tensor t);
  // Owned differentiable input; gradient readable via grad_tensor after
  // backward (the split-learning boundary tensors use this).
  Var input(Tensor t);

  struct Seed {
    Var at;
    Tensor grad;
  };

  void backward(Var loss);                    // scalar loss, implicit seed 1
  void backward(Var at, const Tensor& seed);  // seeded at an intermediate
  void backward(const std::vector<Seed>& seeds);

  const Tensor& value(Var v) const;
  // Gradient of a node after backward; zeros if nothing flowed into it.
  Tensor grad_tensor(Var v) const;

  std::size_t num_nodes() const { return nodes_.size(); }

  // --- plumbing used by the op implementations ---
  struct Node {
    Tensor value;
    std::vector<double> grad;  // sized on demand during backward
    bool needs_grad = false;
    Tensor* bound = nullptr;
    std::function<void(Tape&, const std::vector<double>&)> backward_fn;
  };
  Node& node(std::int32_t id) { return nodes_[id]; }
  const Node& node(std::int32_t id) const { return nodes_[id]; }
  std::vector<double>& grad_buf(std::int32_t id);
  Var emplace(Tensor value, bool needs_grad,
              std::function<void(Tape&, const std::vector<double>&)> fn);

 private:
  void sweep(std::int32_t from);
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Matrix product a[m,k] x b[k,n] -> [m,n].
Var matmul(Var a, Var b);
// Elementwise add; also accepts rank-1 b broadcast over the rows of a 2-D a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var sub_from_scalar(double c, Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
// Concatenate along the last axis; width-0 parts are legal and contribute
// nothing.
Var concat_last(const std::vector<Var>& parts);
Var slice_last(Var a, std::size_t offset, std::size_t len);
Var sum(Var a);
Var mean(Var a);
// Row gather from a 2-D tensor; backward scatter-adds.
Var gather_rows(Var a, std::vector<std::int64_t> rows);
// Adds row i of a into output row target_rows[i], in input-row order.
Var scatter_sum_rows(Var a, std::vector<std::int64_t> target_rows,
                     std::size_t n_out);
// Per-segment column sums where each column's addends are summed in
// value-sorted order, making the result invariant to row permutations at
// the bit level.
Var segment_sum_sorted(Var a, std::vector<std::int64_t> segments,
                       std::size_t n_segments);

}  // namespace fedst::num
