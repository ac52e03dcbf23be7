#include "hgt/topology.hpp"

#include <map>

#include "hgt/error.hpp"

namespace hgt {

Topology compile_topology(const GraphSchema& schema) {
  Topology topo;
  topo.num_nodes = static_cast<int>(schema.nodes.size());
  topo.num_edges = static_cast<int>(schema.edges.size());
  Incidence inc;
  try {
    inc = incidence(schema);
  } catch (const StateError& e) {
    throw ConfigError(e.what());
  }
  topo.edge_nodes = std::move(inc.edge_nodes);
  topo.node_edges = std::move(inc.node_edges);

  std::map<int, std::vector<int>> by_arity;
  for (int e = 0; e < topo.num_edges; ++e) {
    if (topo.edge_nodes[e].empty()) throw ConfigError("edge '" + schema.edges[e].id + "' has no incident nodes");
    by_arity[static_cast<int>(topo.edge_nodes[e].size())].push_back(e);
  }
  for (auto& [arity, edges] : by_arity) topo.groups.push_back(ArityGroup{arity, std::move(edges)});

  topo.label_dim = schema.label_dim();
  std::vector<int> seen(topo.label_dim, 0);
  auto bind = [&](const std::optional<int>& label, const std::string& id) {
    if (!label) return -1;
    if (*label < 0 || *label >= topo.label_dim || seen[*label]++ != 0) {
      throw ConfigError("element '" + id + "' has an invalid or repeated label column");
    }
    return *label;
  };
  for (const auto& v : schema.nodes) topo.node_label.push_back(bind(v.label, v.id));
  for (const auto& e : schema.edges) topo.edge_label.push_back(bind(e.label, e.id));
  return topo;
}

}  // namespace hgt
