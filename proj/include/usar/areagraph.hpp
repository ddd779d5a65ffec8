#pragma once

// Low-resolution area graph and the historical memory matrix.

#include <algorithm>
#include <array>
#include <set>
#include <utility>
#include <vector>

#include "usar/world.hpp"

namespace usar {

// Visited status values; a higher value wins when several apply.
enum class Visit : int { unvisited = 0, visited = 1, current = 2, previous = 3 };

struct AreaNode {
  int area_id = 0;
  int yellow = 0;
  int green = 0;
  Visit status = Visit::unvisited;
  friend bool operator==(const AreaNode&, const AreaNode&) = default;
};

// Rows in canonical (ascending area id) order: yellow count, green count, visited status.
struct MemoryMatrix {
  std::vector<std::array<int, 3>> rows;
  friend bool operator==(const MemoryMatrix&, const MemoryMatrix&) = default;
};

class AreaGraph {
 public:
  AreaGraph() = default;

  explicit AreaGraph(const GridMap& map) {
    nodes_.resize(map.areas.size());
    for (std::size_t a = 0; a < map.areas.size(); ++a) nodes_[a].area_id = map.areas[a].id;
    for (std::size_t v = 0; v < map.victims.size(); ++v) {
      AreaNode& node = nodes_[map.victim_area[v]];
      (map.victims[v].color == Color::yellow ? node.yellow : node.green) += 1;
    }
    for (const Portal& p : map.portals) edges_.insert(std::minmax(map.area_index(p.areas[0]), map.area_index(p.areas[1])));
    current_ = map.area_at(map.spawn);
    nodes_[current_].status = Visit::current;
  }

  const std::vector<AreaNode>& nodes() const { return nodes_; }
  const AreaNode& node(int index) const { return nodes_[index]; }
  const std::set<std::pair<int, int>>& edges() const { return edges_; }
  int current() const { return current_; }
  int previous() const { return previous_; }
  std::size_t size() const { return nodes_.size(); }

  bool adjacent(int a, int b) const { return a != b && edges_.contains(std::minmax(a, b)); }

  std::vector<int> neighbors(int a) const {
    std::vector<int> out;
    for (auto [x, y] : edges_) {
      if (x == a) out.push_back(y);
      if (y == a) out.push_back(x);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // Indices are canonical area indices.
  void on_area_enter(int from, int to) {
    if (from != current_) throw Error("area transition from " + std::to_string(nodes_[from].area_id) +
                                      " but the agent is in " + std::to_string(nodes_[current_].area_id));
    if (!adjacent(from, to))
      throw Error("areas " + std::to_string(nodes_[from].area_id) + " and " + std::to_string(nodes_[to].area_id) +
                  " are not adjacent");
    if (previous_ >= 0 && previous_ != to) nodes_[previous_].status = Visit::visited;
    nodes_[from].status = Visit::previous;
    nodes_[to].status = Visit::current;
    previous_ = from;
    current_ = to;
  }

  void on_triage_complete(int area, Color color) {
    int& count = color == Color::yellow ? nodes_[area].yellow : nodes_[area].green;
    if (count <= 0)
      throw Error("no " + std::string(to_string(color)) + " victim left to triage in area " +
                  std::to_string(nodes_[area].area_id));
    --count;
  }

  // Folds one simulator event; events that do not touch the low-resolution
  // state are ignored. Returns true when the matrix changed.
  bool apply(const GridMap& map, const SimEvent& e) {
    switch (e.kind) {
      case EventKind::area_enter:
        on_area_enter(map.area_index(e.from_area), map.area_index(e.to_area));
        return true;
      case EventKind::triage_complete: {
        const int v = map.victim_index(e.victim);
        on_triage_complete(map.victim_area[v], e.color);
        return true;
      }
      default: return false;
    }
  }

  MemoryMatrix snapshot_matrix() const {
    MemoryMatrix m;
    m.rows.reserve(nodes_.size());
    for (const AreaNode& n : nodes_) m.rows.push_back({n.yellow, n.green, static_cast<int>(n.status)});
    return m;
  }

  friend bool operator==(const AreaGraph&, const AreaGraph&) = default;

 private:
  std::vector<AreaNode> nodes_;
  std::set<std::pair<int, int>> edges_;
  int current_ = -1;
  int previous_ = -1;
};

inline AreaGraph init_graph(const GridMap& map) { return AreaGraph(map); }

}  // namespace usar
