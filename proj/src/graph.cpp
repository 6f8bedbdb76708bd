#include "fedst/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace fedst::graph {

namespace {

std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return ids;
}

void check_square(const std::vector<std::vector<double>>& m, const char* what) {
  for (const auto& row : m) {
    if (row.size() != m.size()) {
      throw DimensionError(std::string(what) + " must be square: " +
                           std::to_string(m.size()) + " rows but a row of " +
                           std::to_string(row.size()));
    }
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open for writing: " + path);
  out.precision(17);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open for reading: " + path);
  return in;
}

}  // namespace

SensorGraph SensorGraph::from_adjacency(
    std::vector<std::vector<double>> adjacency, std::vector<std::string> node_ids,
    std::vector<std::pair<double, double>> coords) {
  check_square(adjacency, "adjacency");
  const std::size_t n = adjacency.size();
  SensorGraph g;
  g.node_ids_ = node_ids.empty() ? default_ids(n) : std::move(node_ids);
  if (g.node_ids_.size() != n) {
    throw DimensionError("node id count " + std::to_string(g.node_ids_.size()) +
                         " does not match adjacency size " + std::to_string(n));
  }
  if (!coords.empty() && coords.size() != n) {
    throw DimensionError("coord count " + std::to_string(coords.size()) +
                         " does not match adjacency size " + std::to_string(n));
  }
  g.coords_ = std::move(coords);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t s = 0; s < n; ++s) {
      const double w = adjacency[r][s];
      if (!(w >= 0.0 && w <= 1.0)) {
        throw GraphConsistencyError("adjacency weight " + std::to_string(w) +
                                    " at (" + std::to_string(r) + "," +
                                    std::to_string(s) + ") outside [0,1]");
      }
      if (w != 0.0) g.edges_.push_back(Edge{s, r, w});
    }
  }
  g.adjacency_ = std::move(adjacency);
  return g;
}

std::size_t SensorGraph::nonself_edge_count() const {
  std::size_t n = 0;
  for (const Edge& e : edges_) {
    if (e.sender != e.receiver) ++n;
  }
  return n;
}

void SensorGraph::save_adjacency_csv(const std::string& path) const {
  std::ofstream out = open_out(path);
  out << "sender,receiver,weight\n";
  for (const Edge& e : edges_) {
    out << node_ids_[e.sender] << "," << node_ids_[e.receiver] << "," << e.weight
        << "\n";
  }
}

SensorGraph build_adjacency(const std::vector<std::vector<double>>& dist,
                            double kappa, std::vector<std::string> node_ids,
                            std::vector<std::pair<double, double>> coords) {
  check_square(dist, "distance matrix");
  if (kappa < 0.0 || kappa > 1.0) {
    throw ContractError("kappa must lie in [0,1], got " + std::to_string(kappa));
  }
  const std::size_t n = dist.size();
  if (n == 0) throw DegenerateInputError("empty distance matrix");

  // sigma over the finite off-diagonal distances only; the zero diagonal
  // would shrink it artificially.
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist[i][j];
      if (std::isnan(d) || d < 0.0) {
        throw ContractError("distance at (" + std::to_string(i) + "," +
                            std::to_string(j) + ") is negative or NaN");
      }
      if (i == j || !std::isfinite(d)) continue;
      sum += d;
      sum_sq += d * d;
      ++count;
    }
  }
  const double sigma =
      count == 0 ? 0.0
                 : std::sqrt(std::max(0.0, sum_sq / count - (sum / count) * (sum / count)));
  if (sigma == 0.0) {
    throw DegenerateInputError(
        "distance matrix has zero spread; Gaussian kernel is degenerate");
  }

  std::vector<std::vector<double>> w(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dist[i][j];
      const double k = std::isfinite(d) ? std::exp(-(d * d) / (sigma * sigma)) : 0.0;
      w[i][j] = k >= kappa ? k : 0.0;
    }
  }
  return SensorGraph::from_adjacency(std::move(w), std::move(node_ids),
                                     std::move(coords));
}

SubgraphResult subgraph_by_longitude(const SensorGraph& g, double eta) {
  if (!g.has_coords()) {
    throw ContractError("subgraph_by_longitude requires node coordinates");
  }
  if (eta <= 0.0 || eta > 1.0) {
    throw ContractError("eta must lie in (0,1], got " + std::to_string(eta));
  }
  const std::size_t n = g.size();
  const std::size_t keep = static_cast<std::size_t>(eta * static_cast<double>(n));
  if (keep == 0) {
    throw DegenerateInputError("eta=" + std::to_string(eta) + " keeps zero of " +
                               std::to_string(n) + " nodes");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return g.coords()[a].first < g.coords()[b].first;
  });
  std::vector<std::size_t> kept(order.begin(), order.begin() + keep);
  std::sort(kept.begin(), kept.end());  // preserve original relative order

  std::vector<std::size_t> old_to_new(n, static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < kept.size(); ++i) old_to_new[kept[i]] = i;

  std::vector<std::vector<double>> adj(keep, std::vector<double>(keep, 0.0));
  std::vector<std::string> ids(keep);
  std::vector<std::pair<double, double>> coords(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    ids[i] = g.node_ids()[kept[i]];
    coords[i] = g.coords()[kept[i]];
    for (std::size_t j = 0; j < keep; ++j) {
      adj[i][j] = g.adjacency()[kept[i]][kept[j]];
    }
  }
  return SubgraphResult{
      SensorGraph::from_adjacency(std::move(adj), std::move(ids), std::move(coords)),
      std::move(kept)};
}

DistanceMatrix load_distance_csv(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty distance file: " + path);
  DistanceMatrix dm;
  dm.node_ids = split_csv_line(line);
  const std::size_t n = dm.node_ids.size();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != n) {
      throw DimensionError("distance row has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(n));
    }
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = fields[i] == "inf" ? std::numeric_limits<double>::infinity()
                                  : std::stod(fields[i]);
    }
    dm.dist.push_back(std::move(row));
  }
  if (dm.dist.size() != n) {
    throw DimensionError("distance body has " + std::to_string(dm.dist.size()) +
                         " rows, expected " + std::to_string(n));
  }
  return dm;
}

void save_distance_csv(const std::string& path, const DistanceMatrix& dm) {
  std::ofstream out = open_out(path);
  for (std::size_t i = 0; i < dm.node_ids.size(); ++i) {
    out << (i ? "," : "") << dm.node_ids[i];
  }
  out << "\n";
  for (const auto& row : dm.dist) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ",";
      if (std::isinf(row[i])) {
        out << "inf";
      } else {
        out << row[i];
      }
    }
    out << "\n";
  }
}

NodeTable load_node_table_csv(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw Error("empty node table: " + path);
  NodeTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw DimensionError("node table row needs id,longitude,latitude");
    }
    t.node_ids.push_back(fields[0]);
    t.coords.emplace_back(std::stod(fields[1]), std::stod(fields[2]));
  }
  return t;
}

void save_node_table_csv(const std::string& path, const NodeTable& table) {
  std::ofstream out = open_out(path);
  out << "id,longitude,latitude\n";
  for (std::size_t i = 0; i < table.node_ids.size(); ++i) {
    out << table.node_ids[i] << "," << table.coords[i].first << ","
        << table.coords[i].second << "\n";
  }
}

}  // namespace fedst::graph
