#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "hgt/cholec_classes.hpp"
#include "hgt/error.hpp"
#include "hgt/schema.hpp"
#include "hgt/topology.hpp"

using namespace hgt;

namespace {

const Task kTasks[] = {Task::triplet, Task::cvs, Task::clipping, Task::clipping_with_cvs_prior};

bool has_rule(const std::vector<Violation>& v, std::string_view rule) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.rule == rule; });
}

}  // namespace

TEST_CASE("canonical schemas are valid and deterministic") {
  for (Task t : kTasks) {
    CAPTURE(task_name(t));
    const auto s = build_task_schema(t);
    CHECK(validate_schema(s).empty());
    CHECK(s == build_task_schema(t));
    CHECK(s.label_dim() == static_cast<int>(task_vocabulary(t).size()));
  }
}

TEST_CASE("triplet schema shape") {
  const auto s = build_task_schema(Task::triplet);
  CHECK(s.nodes.size() == 31);
  CHECK(s.edges.size() == 100);
  for (const auto& e : s.edges) CHECK(e.nodes.size() == 3);
  CHECK(s.label_dim() == 131);
}

TEST_CASE("cvs schema shape and incidence") {
  const auto s = build_task_schema(Task::cvs);
  REQUIRE(s.nodes.size() == 3);
  REQUIRE(s.edges.size() == 1);
  CHECK(s.edges[0].nodes == std::vector<std::string>{"two-structures", "cystic-plate", "hepatocystic-triangle"});
  const auto inc = incidence(s);
  CHECK(inc.edge_nodes[0] == std::vector<int>{0, 1, 2});
  for (const auto& list : inc.node_edges) CHECK(list == std::vector<int>{0});
}

TEST_CASE("clipping with prior carries the CVS nodes") {
  const auto s = build_task_schema(Task::clipping_with_cvs_prior);
  std::set<std::string> ids;
  for (const auto& v : s.nodes) ids.insert(v.id);
  CHECK(ids == std::set<std::string>{"clip-applier", "clip", "cystic-duct", "cystic-artery", "CVS", "two-structures",
                                     "cystic-plate", "hepatocystic-triangle"});
  CHECK(s.edges.size() == 2);
}

TEST_CASE("incidence cardinality matches a scan of the class table") {
  const auto s = build_task_schema(Task::triplet);
  const auto inc = incidence(s);
  for (int tool = 0; tool < cholec::kNumTools; ++tool) {
    int expected = 0;
    for (const auto& c : cholec::triplet_classes()) expected += c.tool == tool ? 1 : 0;
    CHECK(static_cast<int>(inc.node_edges[tool].size()) == expected);
  }
  // incidence maps agree with each other
  for (std::size_t e = 0; e < inc.edge_nodes.size(); ++e) {
    for (int v : inc.edge_nodes[e]) {
      const auto& list = inc.node_edges[v];
      CHECK(std::count(list.begin(), list.end(), static_cast<int>(e)) == 1);
    }
  }
  for (const auto& list : inc.node_edges) {
    CHECK(std::is_sorted(list.begin(), list.end(),
                         [&](int a, int b) { return s.edges[a].id < s.edges[b].id; }));
  }
}

TEST_CASE("single edge incidence") {
  GraphSchema s;
  s.task = Task::triplet;
  s.nodes = {{"a", NodeKind::tool, {}}, {"b", NodeKind::target, {}}};
  s.edges = {{"ab", {"a", "b"}, {}}};
  CHECK(incidence(s).node_edges[0] == std::vector<int>{0});
}

TEST_CASE("validation names the broken element and rule") {
  auto s = build_task_schema(Task::cvs);
  auto ghost = s;
  ghost.edges[0].nodes[1] = "ghost";
  auto v = validate_schema(ghost);
  REQUIRE(has_rule(v, "unknown-node"));
  CHECK(std::count_if(v.begin(), v.end(), [](const Violation& x) {
          return x.rule == "unknown-node" && x.message.find("ghost") != std::string::npos;
        }) == 1);

  auto dup = s;
  dup.nodes[1].id = dup.nodes[0].id;
  v = validate_schema(dup);
  CHECK(std::count_if(v.begin(), v.end(), [](const Violation& x) { return x.rule == "duplicate-id"; }) == 1);

  auto narrow = s;
  narrow.edges[0].nodes = {"two-structures"};
  CHECK(has_rule(validate_schema(narrow), "arity"));

  auto unbound = s;
  unbound.edges[0].label.reset();
  CHECK(has_rule(validate_schema(unbound), "label-unbound"));

  auto twice = s;
  twice.nodes[1].label = 0;
  CHECK(has_rule(validate_schema(twice), "label-double-bound"));

  auto wrong_kind = build_task_schema(Task::clipping);
  wrong_kind.nodes[0].kind = NodeKind::criterion;
  CHECK(has_rule(validate_schema(wrong_kind), "kind-not-allowed"));

  auto dangling = s;
  dangling.nodes.push_back({"lonely", NodeKind::criterion, {}});
  CHECK(has_rule(validate_schema(dangling), "dangling-node"));
}

TEST_CASE("serialization round trip") {
  for (Task t : kTasks) {
    const auto s = build_task_schema(t);
    CHECK(parse_schema(serialize_schema(s)) == s);
    CHECK(serialize_schema(parse_schema(serialize_schema(s))) == serialize_schema(s));
  }
  const auto path = std::filesystem::temp_directory_path() / "hgt_schema_roundtrip.json";
  save_schema_file(build_task_schema(Task::cvs), path);
  CHECK(load_schema_file(path) == build_task_schema(Task::cvs));
  std::filesystem::remove(path);
}

TEST_CASE("parser rejects unknown fields and bad input") {
  CHECK_THROWS_AS(parse_schema(R"({"version": 1, "task": "cvs", "nodes": [], "edges": [], "extra": 1})"), FormatError);
  CHECK_THROWS_AS(parse_schema(R"({"version": 1, "task": "cvs", "nodes": [{"id": "a", "kind": "tool", "colour": 1}], "edges": []})"),
                  FormatError);
  CHECK_THROWS_AS(parse_schema("{not json"), FormatError);
  CHECK_THROWS_AS(parse_task("surgery"), ConfigError);
}

TEST_CASE("schema hash tracks content") {
  const auto a = build_task_schema(Task::cvs);
  auto b = a;
  CHECK(schema_hash(a) == schema_hash(b));
  b.edges[0].nodes = {"cystic-plate", "two-structures", "hepatocystic-triangle"};
  CHECK(schema_hash(a) != schema_hash(b));
  CHECK(hash_hex(schema_hash(a)).size() == 16);
}

TEST_CASE("topology groups edges by arity") {
  const auto topo = compile_topology(build_task_schema(Task::triplet));
  REQUIRE(topo.groups.size() == 1);
  CHECK(topo.groups[0].arity == 3);
  CHECK(topo.groups[0].edges.size() == 100);
  CHECK(topo.label_dim == 131);
  auto bad = build_task_schema(Task::cvs);
  bad.edges[0].nodes[0] = "ghost";
  CHECK_THROWS_AS(compile_topology(bad), ConfigError);
}

TEST_CASE("class table components resolve") {
  const auto vocab = cholec::triplet_vocabulary();
  CHECK(vocab.size() == 131);
  CHECK(std::set<std::string>(vocab.begin(), vocab.end()).size() == vocab.size());
  for (int k = 0; k < cholec::kNumTriplets; ++k) {
    const auto& c = cholec::triplet_classes()[k];
    CHECK(c.tool >= 0);
    CHECK(c.tool < cholec::kNumTools);
    CHECK(c.verb >= 0);
    CHECK(c.verb < cholec::kNumVerbs);
    CHECK(c.target >= 0);
    CHECK(c.target < cholec::kNumTargets);
    CHECK(cholec::triplet_name(k) == std::string(cholec::tool_names()[c.tool]) + "/" +
                                         std::string(cholec::verb_names()[c.verb]) + "/" +
                                         std::string(cholec::target_names()[c.target]));
  }
}
