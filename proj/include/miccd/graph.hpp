#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "miccd/error.hpp"

namespace miccd {

using NodeIndex = std::size_t;
using Edge = std::pair<NodeIndex, NodeIndex>;
using NodeSet = std::vector<NodeIndex>;  // always sorted ascending, no duplicates
using Path = std::vector<NodeIndex>;

inline constexpr std::size_t kDefaultMaxNodes = 64;

/// Immutable DAG over the d causal variables plus the target Y.
///
/// Nodes are addressed by index. The target is a sink. Vectors that cover
/// only the d variables ("feature vectors") are laid out in the order given
/// by variables(), i.e. ascending node index with the target skipped.
class CausalGraph {
 public:
  CausalGraph() = default;

  static CausalGraph build(std::size_t node_count, std::vector<Edge> edges, NodeIndex target,
                           std::size_t max_nodes = kDefaultMaxNodes) {
    if (node_count == 0) throw IndexOutOfRange("graph needs at least one node");
    if (node_count > max_nodes)
      throw GraphTooLarge("graph has " + std::to_string(node_count) + " nodes, limit is " +
                          std::to_string(max_nodes));
    if (target >= node_count) throw IndexOutOfRange("target index out of range");
    for (const auto& [from, to] : edges) {
      if (from >= node_count || to >= node_count)
        throw IndexOutOfRange("edge (" + std::to_string(from) + "," + std::to_string(to) +
                              ") out of range");
      if (from == to) throw CycleError("self-loop on node " + std::to_string(from));
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    CausalGraph g;
    g.node_count_ = node_count;
    g.target_ = target;
    g.edges_ = std::move(edges);
    g.parents_.assign(node_count, {});
    g.children_.assign(node_count, {});
    for (const auto& [from, to] : g.edges_) {
      g.parents_[to].push_back(from);
      g.children_[from].push_back(to);
    }
    for (auto& p : g.parents_) std::sort(p.begin(), p.end());
    for (auto& c : g.children_) std::sort(c.begin(), c.end());

    // Kahn's algorithm with a min-heap: ties resolved by ascending index.
    std::vector<std::size_t> indegree(node_count);
    for (NodeIndex j = 0; j < node_count; ++j) indegree[j] = g.parents_[j].size();
    std::priority_queue<NodeIndex, std::vector<NodeIndex>, std::greater<>> ready;
    for (NodeIndex j = 0; j < node_count; ++j)
      if (indegree[j] == 0) ready.push(j);
    while (!ready.empty()) {
      NodeIndex j = ready.top();
      ready.pop();
      g.order_.push_back(j);
      for (NodeIndex c : g.children_[j])
        if (--indegree[c] == 0) ready.push(c);
    }
    if (g.order_.size() != node_count) throw CycleError("graph contains a directed cycle");
    if (!g.children_[target].empty())
      throw TargetNotSink("target " + std::to_string(target) + " has an outgoing edge");
    g.position_.assign(node_count, 0);
    for (std::size_t k = 0; k < node_count; ++k) g.position_[g.order_[k]] = k;

    for (NodeIndex j = 0; j < node_count; ++j)
      if (j != target) g.variables_.push_back(j);
    return g;
  }

  std::size_t node_count() const { return node_count_; }
  /// Number of non-target variables.
  std::size_t variable_count() const { return node_count_ == 0 ? 0 : node_count_ - 1; }
  NodeIndex target() const { return target_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const NodeSet& parents(NodeIndex j) const { return parents_.at(j); }
  const NodeSet& children(NodeIndex j) const { return children_.at(j); }
  const NodeSet& variables() const { return variables_; }
  bool has_edge(NodeIndex from, NodeIndex to) const {
    return std::binary_search(edges_.begin(), edges_.end(), Edge{from, to});
  }

  /// Topological order; ties broken by ascending index.
  const std::vector<NodeIndex>& topological_order() const { return order_; }
  std::size_t position(NodeIndex j) const { return position_.at(j); }

  /// Nodes reachable from any root by a directed path, roots excluded.
  NodeSet descendants(std::span<const NodeIndex> roots) const {
    std::vector<char> seen(node_count_, 0), is_root(node_count_, 0);
    std::vector<NodeIndex> stack;
    for (NodeIndex r : roots) {
      check_index(r);
      is_root[r] = 1;
      stack.push_back(r);
    }
    while (!stack.empty()) {
      NodeIndex j = stack.back();
      stack.pop_back();
      for (NodeIndex c : children_[j])
        if (!seen[c]) {
          seen[c] = 1;
          stack.push_back(c);
        }
    }
    NodeSet out;
    for (NodeIndex j = 0; j < node_count_; ++j)
      if (seen[j] && !is_root[j]) out.push_back(j);
    return out;
  }
  NodeSet descendants(NodeIndex root) const { return descendants(std::span<const NodeIndex>(&root, 1)); }

  /// Nodes with a directed path into `node`, excluding `node`.
  NodeSet ancestors(NodeIndex node) const {
    check_index(node);
    std::vector<char> seen(node_count_, 0);
    std::vector<NodeIndex> stack{node};
    while (!stack.empty()) {
      NodeIndex j = stack.back();
      stack.pop_back();
      for (NodeIndex p : parents_[j])
        if (!seen[p]) {
          seen[p] = 1;
          stack.push_back(p);
        }
    }
    NodeSet out;
    for (NodeIndex j = 0; j < node_count_; ++j)
      if (seen[j]) out.push_back(j);
    return out;
  }

  bool has_path(NodeIndex src, NodeIndex dst) const {
    auto d = descendants(src);
    return std::binary_search(d.begin(), d.end(), dst);
  }

  /// Every directed path src -> dst, in lexicographic order. Paths in a DAG
  /// are simple, so plain DFS enumerates them exactly once.
  std::vector<Path> directed_paths(NodeIndex src, NodeIndex dst) const {
    check_index(src);
    check_index(dst);
    std::vector<Path> out;
    if (src == dst) return out;
    Path current{src};
    std::function<void(NodeIndex)> walk = [&](NodeIndex j) {
      for (NodeIndex c : children_[j]) {
        current.push_back(c);
        if (c == dst)
          out.push_back(current);
        else
          walk(c);
        current.pop_back();
      }
    };
    walk(src);
    return out;
  }

 private:
  void check_index(NodeIndex j) const {
    if (j >= node_count_) throw IndexOutOfRange("node index " + std::to_string(j) + " out of range");
  }

  std::size_t node_count_ = 0;
  NodeIndex target_ = 0;
  std::vector<Edge> edges_;
  std::vector<NodeSet> parents_, children_;
  std::vector<NodeIndex> order_;
  std::vector<std::size_t> position_;
  NodeSet variables_;
};

inline CausalGraph build_graph(std::size_t node_count, std::vector<Edge> edges, NodeIndex target) {
  return CausalGraph::build(node_count, std::move(edges), target);
}

inline bool contains(const NodeSet& set, NodeIndex j) {
  return std::binary_search(set.begin(), set.end(), j);
}

inline constexpr double kScreenTolerance = 1e-12;

/// Effective-intervention screening.
///
/// `x` and `x_star` are feature vectors (length d, see CausalGraph). Returns
/// the node indices of the interventions that can still move the target:
///   S1: drop coordinates with |x*_i - x_i| <= tol.
///   S2: drop i when every path i -> Y has at least one intermediate node and
///       all intermediates are in the remaining set (no path at all also
///       drops i). Repeated in topological order until nothing changes.
///
/// A path's intermediates are exactly desc(i) ∩ anc(Y), so S2 is checked
/// via reachability rather than path enumeration.
inline NodeSet screen_effective(const CausalGraph& g, std::span<const double> x,
                                std::span<const double> x_star, double tol = kScreenTolerance) {
  const auto& vars = g.variables();
  if (x.size() != vars.size() || x_star.size() != vars.size())
    throw LengthMismatch("screen_effective expects vectors of length " + std::to_string(vars.size()));

  std::vector<char> remaining(g.node_count(), 0);
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (std::abs(x_star[k] - x[k]) > tol) remaining[vars[k]] = 1;

  const NodeIndex target = g.target();
  const NodeSet target_ancestors = g.ancestors(target);
  bool changed = true;
  while (changed) {
    changed = false;
    for (NodeIndex i : g.topological_order()) {
      if (!remaining[i]) continue;
      if (g.has_edge(i, target)) continue;
      bool blocked = true;
      for (NodeIndex m : g.descendants(i))
        if (m != target && contains(target_ancestors, m) && !remaining[m]) {
          blocked = false;
          break;
        }
      if (blocked) {
        remaining[i] = 0;
        changed = true;
      }
    }
  }
  NodeSet out;
  for (NodeIndex j = 0; j < g.node_count(); ++j)
    if (remaining[j]) out.push_back(j);
  return out;
}

// Graph JSON: {"nodes": n, "target": t, "edges": [[i,j],...]}, edges sorted.
inline nlohmann::json graph_to_json(const CausalGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [from, to] : g.edges()) edges.push_back({from, to});
  return {{"nodes", g.node_count()}, {"target", g.target()}, {"edges", edges}};
}

inline CausalGraph graph_from_json(const nlohmann::json& j) {
  try {
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<NodeIndex>(), e.at(1).get<NodeIndex>());
    return CausalGraph::build(j.at("nodes").get<std::size_t>(), std::move(edges),
                              j.at("target").get<NodeIndex>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("graph json: ") + e.what());
  }
}

}  // namespace miccd
