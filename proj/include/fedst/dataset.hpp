#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedst/graph.hpp"
#include "fedst/tensor.hpp"

namespace fedst::data {

// Raw multivariate series: one reading per (node, timestep), feature dim 1.
struct SeriesDataset {
  std::vector<std::string> node_ids;
  std::size_t n_nodes = 0;
  std::size_t length = 0;
  std::vector<double> readings;  // [n_nodes][length], row-major

  double at(std::size_t node, std::size_t t) const {
    return readings[node * length + t];
  }
};

struct NormStats {
  double mean = 0.0;
  double stddev = 1.0;
};

// Index pair describing one sliding window: x = [start, start+m),
// y = [start+m, start+win).
struct WindowSpec {
  std::size_t start = 0;
};

struct WindowLayout {
  std::size_t win = 24;
  std::size_t m = 12;  // input steps; y covers the remaining win - m
  std::size_t stride = 1;
  std::size_t n_steps_out() const { return win - m; }
};

// Sliding windows over a length-T series.
std::vector<WindowSpec> window(std::size_t series_len, const WindowLayout& layout);

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

// Chronological split: floor for train and val, remainder to test. Every
// split must be nonempty.
SplitSizes split(std::size_t n_windows, double train_ratio = 0.7,
                 double val_ratio = 0.1, double test_ratio = 0.2);

void normalize(std::vector<double>& values, const NormStats& stats);
void denormalize(std::vector<double>& values, const NormStats& stats);
double normalize_value(double v, const NormStats& stats);
double denormalize_value(double v, const NormStats& stats);

// One node's windows for one split, materialized as model-ready tensors:
// x [count, m], y [count, n] (feature dim 1 folded into the step axis).
struct NodeSplit {
  num::Tensor x;  // [count, m]
  num::Tensor y;  // [count, n]
  std::size_t count() const { return x.shape().empty() ? 0 : x.dim(0); }
};

struct NodeShards {
  NodeSplit train, val, test;
};

// Windowed, normalized, chronologically split view of a series dataset.
// Normalization stats come from the training windows only.
struct WindowedDataset {
  WindowLayout layout;
  NormStats stats;
  SplitSizes sizes;
  std::vector<NodeShards> nodes;

  std::size_t n_nodes() const { return nodes.size(); }
};

WindowedDataset make_windowed(const SeriesDataset& series, const WindowLayout& layout,
                              double train_ratio = 0.7, double val_ratio = 0.1,
                              double test_ratio = 0.2);

// Same windowing but with an externally fixed scaler (e.g. evaluating a
// model on a graph it was not normalized on).
WindowedDataset make_windowed(const SeriesDataset& series, const WindowLayout& layout,
                              const NormStats& stats, double train_ratio = 0.7,
                              double val_ratio = 0.1, double test_ratio = 0.2);

// Graph-diffusion synthetic generator:
//   z[t+1] = 0.5 z[t] + 0.4 A_hat z[t] + eps,  eps ~ N(0, noise_sigma^2)
// with A_hat the row-normalized adjacency, observed as z plus a sinusoidal
// component shared by all nodes.
struct SynthesisOptions {
  double noise_sigma = 0.2;
  double init_sigma = 1.0;
  double sin_amplitude = 0.5;
  double sin_period = 288.0;  // steps per cycle
  std::uint64_t seed = 0;
};

SeriesDataset synthesize(const graph::SensorGraph& g, std::size_t length,
                         const SynthesisOptions& opts);

// Spectral radius of (0.5 I + 0.4 A_hat) via power iteration; the generator
// is stationary when this stays below 1.
double synthesis_spectral_radius(const graph::SensorGraph& g,
                                 std::size_t iters = 200);

// RMSE on de-normalized values, pooled over every element.
double rmse(const num::Tensor& pred, const num::Tensor& target,
            const NormStats& stats);

// CSV interchange: header of node ids, one row per timestep, one column per
// node.
SeriesDataset load_series_csv(const std::string& path);
void save_series_csv(const std::string& path, const SeriesDataset& series);

}  // namespace fedst::data
