#pragma once

#include <vector>

#include "hgt/schema.hpp"

namespace hgt {

/// Edges that share one arity, and therefore one edge-update network.
struct ArityGroup {
  int arity = 0;
  std::vector<int> edges;  // schema order
};

/// Index form of a schema used by the model.
struct Topology {
  int num_nodes = 0;
  int num_edges = 0;
  std::vector<std::vector<int>> edge_nodes;  // incidence order
  std::vector<std::vector<int>> node_edges;  // sorted by edge id
  std::vector<ArityGroup> groups;            // ascending arity
  std::vector<int> node_label;               // output column or -1
  std::vector<int> edge_label;
  int label_dim = 0;
};

/// Requires every incidence to resolve and the bound labels to be distinct
/// columns in [0, label_dim); throws ConfigError otherwise.
Topology compile_topology(const GraphSchema& schema);

}  // namespace hgt
