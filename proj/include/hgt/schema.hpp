#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hgt {

enum class Task { triplet, cvs, clipping, clipping_with_cvs_prior };

std::string_view task_name(Task task);

/// Throws ConfigError for unknown ids.
Task parse_task(std::string_view name);

/// True for the tasks whose schemas carry CVS criterion/composite nodes.
bool is_cvs_related(Task task);

/// Task identity plus its dataset conventions (1 FPS grid, seconds).
struct TaskSpec {
  Task task = Task::triplet;
  int past_window = 4;
  int horizon = 4;
  std::vector<std::string> vocabulary;
};

TaskSpec task_spec(Task task);

/// Label vocabulary, in column order, of each task.
std::vector<std::string> task_vocabulary(Task task);

enum class NodeKind { tool, action, target, criterion, composite };

std::string_view node_kind_name(NodeKind kind);
NodeKind parse_node_kind(std::string_view name);

struct ConceptNode {
  std::string id;
  NodeKind kind = NodeKind::tool;
  std::optional<int> label;

  bool operator==(const ConceptNode&) const = default;
};

struct HyperEdge {
  std::string id;
  std::vector<std::string> nodes;  // incidence order is the concatenation order
  std::optional<int> label;

  bool operator==(const HyperEdge&) const = default;
};

/// Expert-knowledge hypergraph for one prediction task.
struct GraphSchema {
  int version = 1;
  Task task = Task::triplet;
  std::vector<ConceptNode> nodes;
  std::vector<HyperEdge> edges;

  /// Number of bound label columns.
  int label_dim() const;

  bool operator==(const GraphSchema&) const = default;
};

inline constexpr int kSchemaVersion = 1;

/// Canonical schema of a task, parsed from the shipped schema files.
GraphSchema build_task_schema(Task task);

/// One broken invariant.
struct Violation {
  std::string element;
  std::string rule;
  std::string message;
};

/// Empty iff every schema invariant holds.
std::vector<Violation> validate_schema(const GraphSchema& schema);

/// Index-level incidence. node_edges lists are sorted by edge id.
struct Incidence {
  std::vector<std::vector<int>> edge_nodes;
  std::vector<std::vector<int>> node_edges;
};

Incidence incidence(const GraphSchema& schema);

/// Structured-text (JSON) form with fields {version, task, nodes, edges}.
std::string serialize_schema(const GraphSchema& schema);

/// Rejects unknown fields and malformed entries with FormatError.
GraphSchema parse_schema(std::string_view text);

GraphSchema load_schema_file(const std::filesystem::path& path);
void save_schema_file(const GraphSchema& schema, const std::filesystem::path& path);

/// FNV-1a hash of the serialized schema.
std::uint64_t schema_hash(const GraphSchema& schema);

std::string hash_hex(std::uint64_t hash);

}  // namespace hgt
