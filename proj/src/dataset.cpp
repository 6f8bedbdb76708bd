#include "fedst/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "fedst/rng.hpp"

namespace fedst::data {

std::vector<WindowSpec> window(std::size_t series_len, const WindowLayout& layout) {
  if (layout.m == 0 || layout.m >= layout.win) {
    throw ContractError("window layout needs 0 < m < win");
  }
  if (layout.stride == 0) throw ContractError("window stride must be positive");
  if (series_len < layout.win) {
    throw DegenerateInputError("series length " + std::to_string(series_len) +
                               " shorter than window " + std::to_string(layout.win));
  }
  std::vector<WindowSpec> specs;
  for (std::size_t start = 0; start + layout.win <= series_len;
       start += layout.stride) {
    specs.push_back(WindowSpec{start});
  }
  return specs;
}

SplitSizes split(std::size_t n_windows, double train_ratio, double val_ratio,
                 double test_ratio) {
  const double total = train_ratio + val_ratio + test_ratio;
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractError("split ratios must sum to 1, got " + std::to_string(total));
  }
  SplitSizes s;
  s.train = static_cast<std::size_t>(train_ratio * static_cast<double>(n_windows));
  s.val = static_cast<std::size_t>(val_ratio * static_cast<double>(n_windows));
  s.test = n_windows - s.train - s.val;
  if (s.train == 0 || s.val == 0 || s.test == 0) {
    throw DegenerateInputError("split of " + std::to_string(n_windows) +
                               " windows leaves an empty part (train=" +
                               std::to_string(s.train) + ", val=" +
                               std::to_string(s.val) + ", test=" +
                               std::to_string(s.test) + ")");
  }
  return s;
}

double normalize_value(double v, const NormStats& stats) {
  return (v - stats.mean) / stats.stddev;
}

double denormalize_value(double v, const NormStats& stats) {
  return v * stats.stddev + stats.mean;
}

void normalize(std::vector<double>& values, const NormStats& stats) {
  if (stats.stddev <= 0.0) {
    throw DegenerateInputError("normalize with non-positive std");
  }
  for (double& v : values) v = normalize_value(v, stats);
}

void denormalize(std::vector<double>& values, const NormStats& stats) {
  for (double& v : values) v = denormalize_value(v, stats);
}

namespace {

NodeSplit materialize(const SeriesDataset& series, std::size_t node,
                      const std::vector<WindowSpec>& specs, std::size_t lo,
                      std::size_t hi, const WindowLayout& layout,
                      const NormStats& stats) {
  const std::size_t count = hi - lo;
  const std::size_t n_out = layout.n_steps_out();
  NodeSplit out;
  out.x = num::Tensor({count, layout.m});
  out.y = num::Tensor({count, n_out});
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = specs[lo + w].start;
    for (std::size_t t = 0; t < layout.m; ++t) {
      out.x.at(w, t) = normalize_value(series.at(node, start + t), stats);
    }
    for (std::size_t t = 0; t < n_out; ++t) {
      out.y.at(w, t) = normalize_value(series.at(node, start + layout.m + t), stats);
    }
  }
  return out;
}

}  // namespace

WindowedDataset make_windowed(const SeriesDataset& series, const WindowLayout& layout,
                              double train_ratio, double val_ratio,
                              double test_ratio) {
  if (series.n_nodes == 0) throw DegenerateInputError("dataset has no nodes");
  const std::vector<WindowSpec> specs = window(series.length, layout);
  const SplitSizes sizes = split(specs.size(), train_ratio, val_ratio, test_ratio);

  // Stats over every value appearing in a training window (with
  // multiplicity), so the normalized training set is exactly zero-mean,
  // unit-std. Val/test never contribute.
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (std::size_t node = 0; node < series.n_nodes; ++node) {
    for (std::size_t w = 0; w < sizes.train; ++w) {
      for (std::size_t t = 0; t < layout.win; ++t) {
        const double v = series.at(node, specs[w].start + t);
        sum += v;
        sum_sq += v * v;
        ++count;
      }
    }
  }
  NormStats stats;
  stats.mean = sum / static_cast<double>(count);
  stats.stddev = std::sqrt(
      std::max(0.0, sum_sq / static_cast<double>(count) - stats.mean * stats.mean));
  if (stats.stddev <= 0.0) {
    throw DegenerateInputError("training data is constant; z-score undefined");
  }
  return make_windowed(series, layout, stats, train_ratio, val_ratio, test_ratio);
}

WindowedDataset make_windowed(const SeriesDataset& series, const WindowLayout& layout,
                              const NormStats& stats, double train_ratio,
                              double val_ratio, double test_ratio) {
  if (series.n_nodes == 0) throw DegenerateInputError("dataset has no nodes");
  if (stats.stddev <= 0.0) {
    throw DegenerateInputError("normalization stats have non-positive std");
  }
  const std::vector<WindowSpec> specs = window(series.length, layout);
  const SplitSizes sizes = split(specs.size(), train_ratio, val_ratio, test_ratio);

  WindowedDataset out;
  out.layout = layout;
  out.stats = stats;
  out.sizes = sizes;
  out.nodes.resize(series.n_nodes);
  for (std::size_t node = 0; node < series.n_nodes; ++node) {
    NodeShards& shards = out.nodes[node];
    shards.train = materialize(series, node, specs, 0, sizes.train, layout, stats);
    shards.val = materialize(series, node, specs, sizes.train,
                             sizes.train + sizes.val, layout, stats);
    shards.test = materialize(series, node, specs, sizes.train + sizes.val,
                              specs.size(), layout, stats);
  }
  return out;
}

namespace {

std::vector<std::vector<double>> row_normalized(const graph::SensorGraph& g) {
  const std::size_t n = g.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) row_sum += g.adjacency()[i][j];
    if (row_sum <= 0.0) {
      throw DegenerateInputError("adjacency row " + std::to_string(i) +
                                 " sums to zero; cannot row-normalize");
    }
    for (std::size_t j = 0; j < n; ++j) a[i][j] = g.adjacency()[i][j] / row_sum;
  }
  return a;
}

}  // namespace

SeriesDataset synthesize(const graph::SensorGraph& g, std::size_t length,
                         const SynthesisOptions& opts) {
  const std::size_t n = g.size();
  const std::vector<std::vector<double>> a_hat = row_normalized(g);
  Rng rng(opts.seed);

  SeriesDataset out;
  out.node_ids = g.node_ids();
  out.n_nodes = n;
  out.length = length;
  out.readings.assign(n * length, 0.0);

  std::vector<double> z(n), z_next(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = rng.normal(0.0, opts.init_sigma);

  const double two_pi = 6.283185307179586476925286766559;
  for (std::size_t t = 0; t < length; ++t) {
    const double seasonal =
        opts.sin_amplitude == 0.0
            ? 0.0
            : opts.sin_amplitude *
                  std::sin(two_pi * static_cast<double>(t) / opts.sin_period);
    for (std::size_t i = 0; i < n; ++i) {
      out.readings[i * length + t] = z[i] + seasonal;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double diffused = 0.0;
      for (std::size_t j = 0; j < n; ++j) diffused += a_hat[i][j] * z[j];
      z_next[i] = 0.5 * z[i] + 0.4 * diffused +
                  (opts.noise_sigma == 0.0 ? 0.0 : rng.normal(0.0, opts.noise_sigma));
    }
    z.swap(z_next);
  }
  return out;
}

double synthesis_spectral_radius(const graph::SensorGraph& g, std::size_t iters) {
  const std::size_t n = g.size();
  const std::vector<std::vector<double>> a_hat = row_normalized(g);
  Rng rng(12345);
  std::vector<double> v(n), w(n);
  for (double& x : v) x = rng.normal();
  double norm = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.5 * v[i];
      for (std::size_t j = 0; j < n; ++j) acc += 0.4 * a_hat[i][j] * v[j];
      w[i] = acc;
    }
    norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
  }
  return norm;
}

double rmse(const num::Tensor& pred, const num::Tensor& target,
            const NormStats& stats) {
  if (!pred.same_shape(target)) {
    throw DimensionError("rmse shapes differ: " + num::shape_str(pred.shape()) +
                         " vs " + num::shape_str(target.shape()));
  }
  if (pred.numel() == 0) throw DegenerateInputError("rmse of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d =
        denormalize_value(pred[i], stats) - denormalize_value(target[i], stats);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.numel()));
}

SeriesDataset load_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty series file: " + path);

  SeriesDataset out;
  {
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.node_ids.push_back(field);
  }
  out.n_nodes = out.node_ids.size();
  if (out.n_nodes == 0) throw DegenerateInputError("series file has no columns");

  std::vector<std::vector<double>> cols(out.n_nodes);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::size_t i = 0;
    while (std::getline(ss, field, ',')) {
      if (i >= out.n_nodes) break;
      cols[i].push_back(std::stod(field));
      ++i;
    }
    if (i != out.n_nodes) {
      throw DimensionError("series row has " + std::to_string(i) +
                           " fields, expected " + std::to_string(out.n_nodes));
    }
  }
  out.length = cols[0].size();
  out.readings.assign(out.n_nodes * out.length, 0.0);
  for (std::size_t node = 0; node < out.n_nodes; ++node) {
    for (std::size_t t = 0; t < out.length; ++t) {
      out.readings[node * out.length + t] = cols[node][t];
    }
  }
  return out;
}

void save_series_csv(const std::string& path, const SeriesDataset& series) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open for writing: " + path);
  out.precision(17);
  for (std::size_t i = 0; i < series.n_nodes; ++i) {
    out << (i ? "," : "") << series.node_ids[i];
  }
  out << "\n";
  for (std::size_t t = 0; t < series.length; ++t) {
    for (std::size_t i = 0; i < series.n_nodes; ++i) {
      if (i) out << ",";
      out << series.at(i, t);
    }
    out << "\n";
  }
}

}  // namespace fedst::data
