#include "hgt/schema.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hgt/cholec_classes.hpp"
#include "hgt/error.hpp"
#include "hgt_embedded_schemas.hpp"

namespace hgt {

namespace {

using nlohmann::json;

constexpr std::string_view kCvsAchieved = "CVS-achieved";

const std::vector<std::string>& criteria_labels() {
  static const std::vector<std::string> names = {"two-structures", "cystic-plate", "hepatocystic-triangle"};
  return names;
}

const std::vector<std::string>& clipping_labels() {
  static const std::vector<std::string> names = {"clip-applier", "clip", "cystic-duct", "cystic-artery"};
  return names;
}

void require_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                  std::initializer_list<std::string_view> required, const std::string& where) {
  if (!obj.is_object()) throw FormatError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw FormatError(where + ": unknown field '" + key + "'");
    }
  }
  for (auto key : required) {
    if (!obj.contains(std::string(key))) throw FormatError(where + ": missing field '" + std::string(key) + "'");
  }
}

std::optional<int> parse_label(const json& obj, const std::string& where) {
  if (!obj.contains("label")) return std::nullopt;
  const auto& v = obj.at("label");
  if (!v.is_number_integer()) throw FormatError(where + ": label must be an integer column index");
  return v.get<int>();
}

std::string quoted(std::string_view s) { return json(std::string(s)).dump(); }

}  // namespace

std::string_view task_name(Task task) {
  switch (task) {
    case Task::triplet: return "triplet";
    case Task::cvs: return "cvs";
    case Task::clipping: return "clipping";
    case Task::clipping_with_cvs_prior: return "clipping_with_cvs_prior";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::triplet, Task::cvs, Task::clipping, Task::clipping_with_cvs_prior}) {
    if (task_name(t) == name) return t;
  }
  throw ConfigError("unknown task id '" + std::string(name) + "'");
}

bool is_cvs_related(Task task) { return task == Task::cvs || task == Task::clipping_with_cvs_prior; }

std::vector<std::string> task_vocabulary(Task task) {
  std::vector<std::string> vocab;
  switch (task) {
    case Task::triplet:
      return cholec::triplet_vocabulary();
    case Task::cvs:
      vocab = criteria_labels();
      vocab.emplace_back(kCvsAchieved);
      return vocab;
    case Task::clipping:
      vocab = clipping_labels();
      vocab.push_back(cholec::triplet_name(79));  // clip-applier/clip/cystic-duct
      vocab.push_back(cholec::triplet_name(78));  // clip-applier/clip/cystic-artery
      return vocab;
    case Task::clipping_with_cvs_prior:
      vocab = clipping_labels();
      vocab.emplace_back(kCvsAchieved);
      for (const auto& c : criteria_labels()) vocab.push_back(c);
      vocab.push_back(cholec::triplet_name(79));
      vocab.push_back(cholec::triplet_name(78));
      return vocab;
  }
  throw ConfigError("unknown task");
}

TaskSpec task_spec(Task task) {
  TaskSpec spec;
  spec.task = task;
  spec.vocabulary = task_vocabulary(task);
  return spec;
}

std::string_view node_kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::tool: return "tool";
    case NodeKind::action: return "action";
    case NodeKind::target: return "target";
    case NodeKind::criterion: return "criterion";
    case NodeKind::composite: return "composite";
  }
  return "unknown";
}

NodeKind parse_node_kind(std::string_view name) {
  for (NodeKind k : {NodeKind::tool, NodeKind::action, NodeKind::target, NodeKind::criterion,
                     NodeKind::composite}) {
    if (node_kind_name(k) == name) return k;
  }
  throw FormatError("unknown node kind '" + std::string(name) + "'");
}

int GraphSchema::label_dim() const {
  int n = 0;
  for (const auto& v : nodes) n += v.label.has_value() ? 1 : 0;
  for (const auto& e : edges) n += e.label.has_value() ? 1 : 0;
  return n;
}

GraphSchema build_task_schema(Task task) {
  switch (task) {
    case Task::triplet: return parse_schema(embedded::kTripletSchema);
    case Task::cvs: return parse_schema(embedded::kCvsSchema);
    case Task::clipping: return parse_schema(embedded::kClippingSchema);
    case Task::clipping_with_cvs_prior: return parse_schema(embedded::kClippingWithCvsPriorSchema);
  }
  throw ConfigError("unknown task");
}

std::vector<Violation> validate_schema(const GraphSchema& schema) {
  std::vector<Violation> out;
  auto report = [&](std::string element, std::string rule, std::string message) {
    out.push_back(Violation{std::move(element), std::move(rule), std::move(message)});
  };

  if (schema.version != kSchemaVersion) {
    report("schema", "unsupported-version", "version " + std::to_string(schema.version) + " is not supported");
  }

  std::map<std::string, int> seen;
  auto check_id = [&](const std::string& id) {
    if (id.empty()) report(id, "empty-id", "element id is empty");
    if (++seen[id] == 2) report(id, "duplicate-id", "id '" + id + "' is used by more than one element");
  };
  for (const auto& v : schema.nodes) check_id(v.id);
  for (const auto& e : schema.edges) check_id(e.id);

  std::set<std::string> node_ids;
  for (const auto& v : schema.nodes) {
    node_ids.insert(v.id);
    if ((v.kind == NodeKind::criterion || v.kind == NodeKind::composite) && !is_cvs_related(schema.task)) {
      report(v.id, "kind-not-allowed",
             std::string(node_kind_name(v.kind)) + " nodes only belong to CVS-related schemas");
    }
  }

  std::set<std::string> incident;
  for (const auto& e : schema.edges) {
    if (e.nodes.size() < 2) {
      report(e.id, "arity", "hyperedge needs at least 2 incident nodes, has " + std::to_string(e.nodes.size()));
    }
    std::set<std::string> local;
    for (const auto& n : e.nodes) {
      if (node_ids.count(n) == 0) {
        report(e.id, "unknown-node", "edge '" + e.id + "' references unknown node '" + n + "'");
      }
      if (!local.insert(n).second) {
        report(e.id, "repeated-incidence", "node '" + n + "' appears twice in edge '" + e.id + "'");
      }
      incident.insert(n);
    }
  }

  if (schema.task != Task::triplet) {
    for (const auto& v : schema.nodes) {
      if (incident.count(v.id) == 0) {
        report(v.id, "dangling-node", "node '" + v.id + "' is not incident to any edge");
      }
    }
  }

  const auto vocab = task_vocabulary(schema.task);
  const int columns = static_cast<int>(vocab.size());
  std::vector<int> bound(columns, 0);
  auto check_label = [&](const std::string& id, const std::optional<int>& label) {
    if (!label) return;
    if (*label < 0 || *label >= columns) {
      report(id, "label-out-of-range",
             "label column " + std::to_string(*label) + " outside [0, " + std::to_string(columns) + ")");
      return;
    }
    if (++bound[*label] == 2) {
      report(id, "label-double-bound", "label column '" + vocab[*label] + "' is bound more than once");
    }
  };
  for (const auto& v : schema.nodes) check_label(v.id, v.label);
  for (const auto& e : schema.edges) check_label(e.id, e.label);
  for (int c = 0; c < columns; ++c) {
    if (bound[c] == 0) report(vocab[c], "label-unbound", "label column '" + vocab[c] + "' binds to no element");
  }
  return out;
}

Incidence incidence(const GraphSchema& schema) {
  std::map<std::string, int> node_index;
  for (int i = 0; i < static_cast<int>(schema.nodes.size()); ++i) node_index[schema.nodes[i].id] = i;

  Incidence inc;
  inc.edge_nodes.resize(schema.edges.size());
  inc.node_edges.resize(schema.nodes.size());
  for (int e = 0; e < static_cast<int>(schema.edges.size()); ++e) {
    for (const auto& n : schema.edges[e].nodes) {
      auto it = node_index.find(n);
      if (it == node_index.end()) throw StateError("incidence: unknown node '" + n + "'");
      inc.edge_nodes[e].push_back(it->second);
      inc.node_edges[it->second].push_back(e);
    }
  }
  for (auto& list : inc.node_edges) {
    std::sort(list.begin(), list.end(),
              [&](int a, int b) { return schema.edges[a].id < schema.edges[b].id; });
  }
  return inc;
}

std::string serialize_schema(const GraphSchema& schema) {
  std::ostringstream os;
  os << "{\n  \"version\": " << schema.version << ",\n  \"task\": " << quoted(task_name(schema.task))
     << ",\n  \"nodes\": [\n";
  for (std::size_t i = 0; i < schema.nodes.size(); ++i) {
    const auto& v = schema.nodes[i];
    os << "    {\"id\": " << quoted(v.id) << ", \"kind\": " << quoted(node_kind_name(v.kind));
    if (v.label) os << ", \"label\": " << *v.label;
    os << "}" << (i + 1 < schema.nodes.size() ? "," : "") << "\n";
  }
  os << "  ],\n  \"edges\": [\n";
  for (std::size_t i = 0; i < schema.edges.size(); ++i) {
    const auto& e = schema.edges[i];
    os << "    {\"id\": " << quoted(e.id) << ", \"nodes\": [";
    for (std::size_t k = 0; k < e.nodes.size(); ++k) os << (k ? ", " : "") << quoted(e.nodes[k]);
    os << "]";
    if (e.label) os << ", \"label\": " << *e.label;
    os << "}" << (i + 1 < schema.edges.size() ? "," : "") << "\n";
  }
  os << "  ]\n}\n";
  return os.str();
}

GraphSchema parse_schema(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("schema: ") + e.what());
  }
  require_keys(doc, {"version", "task", "nodes", "edges"}, {"version", "task", "nodes", "edges"}, "schema");
  GraphSchema schema;
  if (!doc["version"].is_number_integer()) throw FormatError("schema: version must be an integer");
  schema.version = doc["version"].get<int>();
  if (!doc["task"].is_string()) throw FormatError("schema: task must be a string");
  try {
    schema.task = parse_task(doc["task"].get<std::string>());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("schema: ") + e.what());
  }
  if (!doc["nodes"].is_array() || !doc["edges"].is_array()) throw FormatError("schema: nodes and edges must be lists");

  for (std::size_t i = 0; i < doc["nodes"].size(); ++i) {
    const auto& n = doc["nodes"][i];
    const std::string where = "schema node " + std::to_string(i);
    require_keys(n, {"id", "kind", "label"}, {"id", "kind"}, where);
    if (!n["id"].is_string() || !n["kind"].is_string()) throw FormatError(where + ": id and kind must be strings");
    schema.nodes.push_back(
        ConceptNode{n["id"].get<std::string>(), parse_node_kind(n["kind"].get<std::string>()), parse_label(n, where)});
  }
  for (std::size_t i = 0; i < doc["edges"].size(); ++i) {
    const auto& e = doc["edges"][i];
    const std::string where = "schema edge " + std::to_string(i);
    require_keys(e, {"id", "nodes", "label"}, {"id", "nodes"}, where);
    if (!e["id"].is_string() || !e["nodes"].is_array()) throw FormatError(where + ": malformed id or nodes");
    HyperEdge edge{e["id"].get<std::string>(), {}, parse_label(e, where)};
    for (const auto& n : e["nodes"]) {
      if (!n.is_string()) throw FormatError(where + ": incident node ids must be strings");
      edge.nodes.push_back(n.get<std::string>());
    }
    schema.edges.push_back(std::move(edge));
  }
  return schema;
}

GraphSchema load_schema_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open schema file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_schema(buf.str());
}

void save_schema_file(const GraphSchema& schema, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write schema file " + path.string());
  out << serialize_schema(schema);
}

std::uint64_t schema_hash(const GraphSchema& schema) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_schema(schema)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[hash & 0xf];
    hash >>= 4;
  }
  return s;
}

}  // namespace hgt
