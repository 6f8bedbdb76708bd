#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fedst/errors.hpp"

namespace fedst::graph {

struct Edge {
  std::size_t sender = 0;
  std::size_t receiver = 0;
  double weight = 0.0;
};

// Directed weighted sensor graph. The edge list and the dense adjacency are
// kept in lockstep: adjacency[receiver][sender] is nonzero exactly when the
// corresponding edge exists, and edges are enumerated receiver-major so
// construction order is deterministic.
class SensorGraph {
 public:
  SensorGraph() = default;

  static SensorGraph from_adjacency(std::vector<std::vector<double>> adjacency,
                                    std::vector<std::string> node_ids = {},
                                    std::vector<std::pair<double, double>> coords = {});

  std::size_t size() const { return node_ids_.size(); }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  bool has_coords() const { return !coords_.empty(); }
  // (longitude, latitude) per node.
  const std::vector<std::pair<double, double>>& coords() const { return coords_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::vector<double>>& adjacency() const { return adjacency_; }
  double weight(std::size_t receiver, std::size_t sender) const {
    return adjacency_[receiver][sender];
  }

  std::size_t nonself_edge_count() const;

  void save_adjacency_csv(const std::string& path) const;

 private:
  std::vector<std::string> node_ids_;
  std::vector<std::pair<double, double>> coords_;
  std::vector<Edge> edges_;
  std::vector<std::vector<double>> adjacency_;
};

// Thresholded Gaussian kernel over pairwise distances: entries become
// exp(-dist^2/sigma^2) where sigma is the population standard deviation of
// the finite off-diagonal distances, then values below kappa are dropped.
SensorGraph build_adjacency(const std::vector<std::vector<double>>& dist,
                            double kappa = 0.1,
                            std::vector<std::string> node_ids = {},
                            std::vector<std::pair<double, double>> coords = {});

struct SubgraphResult {
  SensorGraph graph;
  std::vector<std::size_t> index_map;  // subgraph index -> original index
};

// Keeps the floor(eta * |V|) nodes with smallest longitude (ties broken by
// original node order), preserving relative order, with induced edges.
SubgraphResult subgraph_by_longitude(const SensorGraph& g, double eta);

// CSV interchange -------------------------------------------------------

struct DistanceMatrix {
  std::vector<std::string> node_ids;
  std::vector<std::vector<double>> dist;
};

// Header row of node ids, then a square body of distances.
DistanceMatrix load_distance_csv(const std::string& path);
void save_distance_csv(const std::string& path, const DistanceMatrix& dm);

struct NodeTable {
  std::vector<std::string> node_ids;
  std::vector<std::pair<double, double>> coords;
};

// Columns: id, longitude, latitude (with header).
NodeTable load_node_table_csv(const std::string& path);
void save_node_table_csv(const std::string& path, const NodeTable& table);

}  // namespace fedst::graph
