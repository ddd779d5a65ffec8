#pragma once

// Goal candidates, the Manhattan-distance-difference window, and the
// network input assembly for the multi-resolution model and its baselines.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "usar/areagraph.hpp"
#include "usar/world.hpp"

namespace usar {

enum class GoalKind : std::uint8_t { portal, victim };

inline std::string_view to_string(GoalKind k) { return k == GoalKind::portal ? "portal" : "victim"; }

struct GoalCandidate {
  int slot = 0;
  GoalKind kind = GoalKind::portal;
  int ref_id = 0;  // portal id or victim id
  Coord cell;
  friend bool operator==(const GoalCandidate&, const GoalCandidate&) = default;
};

// Agent cells bracketing the last m move actions: after m moves it holds
// m + 1 positions, oldest first.
class MoveWindow {
 public:
  explicit MoveWindow(int m = 6) : m_(m), ring_(static_cast<std::size_t>(m) + 1) {
    if (m < 1) throw Error("move window needs m >= 1");
  }

  void reset(Coord start) {
    head_ = 0;
    size_ = 0;
    push(start);
  }

  // Called once per move action, blocked or not, with the resulting cell.
  void push(Coord c) {
    ring_[(head_ + size_) % ring_.size()] = c;
    if (size_ < ring_.size())
      ++size_;
    else
      head_ = (head_ + 1) % ring_.size();
  }

  int m() const { return m_; }
  bool full() const { return size_ == ring_.size(); }
  int moves() const { return size_ == 0 ? 0 : static_cast<int>(size_) - 1; }

  Coord initial() const { return at(0); }
  Coord final() const { return at(size_ - 1); }
  Coord at(std::size_t i) const { return ring_[(head_ + i) % ring_.size()]; }

  std::vector<Coord> positions() const {
    std::vector<Coord> out;
    for (std::size_t i = 0; i < size_; ++i) out.push_back(at(i));
    return out;
  }

 private:
  int m_;
  std::vector<Coord> ring_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

// Positive when the agent's net displacement over the window approached the goal.
inline int delta_md(const MoveWindow& window, Coord goal) {
  if (!window.full())
    throw Error("move window holds " + std::to_string(window.moves()) + " of " + std::to_string(window.m()) + " moves");
  return manhattan(window.initial(), goal) - manhattan(window.final(), goal);
}

// Portals of the area by ascending id, then its waiting victims in row-major order.
inline std::vector<GoalCandidate> enumerate_goals(const Mission& mission, int area) {
  const GridMap& map = mission.map();
  std::vector<GoalCandidate> out;
  for (int p : map.area_portals[area]) out.push_back({0, GoalKind::portal, map.portals[p].id, map.portals[p].cell});
  for (int v : map.area_victims[area])
    if (mission.status(v) == VictimStatus::waiting)
      out.push_back({0, GoalKind::victim, map.victims[v].id, map.victims[v].cell});
  if (out.size() > static_cast<std::size_t>(kMaxGoals))
    throw Error("area " + std::to_string(map.areas[area].id) + " has more than " + std::to_string(kMaxGoals) +
                " candidate goals");
  for (std::size_t i = 0; i < out.size(); ++i) out[i].slot = static_cast<int>(i);
  return out;
}

// Input scaling, recorded in the model manifest.
struct Normalization {
  double count_scale = 0.1;  // victim counts
  // Δ_MD is divided by the window length m; coordinates by map dimensions.
};

inline constexpr int kLowResPerArea = 6;  // yellow, green, one-hot visited status

struct FeatureFrame {
  std::array<double, kMaxGoals> dmd{};
  std::array<std::uint8_t, kMaxGoals> mask{};
  std::vector<double> lowres;
  std::vector<double> locations;  // last m move destinations, for the location baseline
  std::optional<int> goal_label;
  std::optional<int> victim_label;  // 1 = yellow, 0 = green
  double t = 0.0;
  std::string trial_id;
  int area_id = 0;
  int area_index = 0;
  int m = 6;

  int active() const {
    int n = 0;
    for (auto b : mask) n += b;
    return n;
  }
  int num_areas() const { return static_cast<int>(lowres.size()) / kLowResPerArea; }
  friend bool operator==(const FeatureFrame&, const FeatureFrame&) = default;
};

inline std::vector<double> encode_lowres(const MemoryMatrix& matrix, const Normalization& norm = {}) {
  std::vector<double> out;
  out.reserve(matrix.rows.size() * kLowResPerArea);
  for (const auto& row : matrix.rows) {
    out.push_back(row[0] * norm.count_scale);
    out.push_back(row[1] * norm.count_scale);
    for (int s = 0; s < 4; ++s) out.push_back(row[2] == s ? 1.0 : 0.0);
  }
  return out;
}

inline std::vector<double> build_baseline_locations(const MoveWindow& window, const GridMap& map) {
  if (!window.full()) throw Error("move window is not full");
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(window.m()));
  for (int i = 1; i <= window.m(); ++i) {
    const Coord c = window.at(i);
    out.push_back(static_cast<double>(c.row) / map.height);
    out.push_back(static_cast<double>(c.col) / map.width);
  }
  return out;
}

inline std::vector<double> build_baseline_dmd_area(const FeatureFrame& frame) {
  std::vector<double> out(frame.dmd.begin(), frame.dmd.end());
  const int areas = frame.num_areas();
  out.push_back(areas > 0 ? static_cast<double>(frame.area_index) / areas : 0.0);
  return out;
}

inline FeatureFrame build_frame(const Mission& mission, const AreaGraph& graph, const MoveWindow& window,
                                const Normalization& norm = {}) {
  const int area = mission.area();
  FeatureFrame f;
  f.m = window.m();
  f.t = mission.time();
  f.area_index = area;
  f.area_id = mission.map().areas[area].id;
  const auto goals = enumerate_goals(mission, area);
  for (const GoalCandidate& g : goals) {
    f.dmd[g.slot] = static_cast<double>(delta_md(window, g.cell)) / window.m();
    f.mask[g.slot] = 1;
  }
  f.lowres = encode_lowres(graph.snapshot_matrix(), norm);
  f.locations = build_baseline_locations(window, mission.map());
  return f;
}

// Mission plus the derived low- and high-resolution state, kept in step by
// folding every produced event. Shared by labeling, offline prediction and
// live sessions so that all three see identical features.
class MissionTracker {
 public:
  MissionTracker(std::shared_ptr<const GridMap> map, int m, MissionConfig config = {})
      : mission_(std::move(map), config), graph_(mission_.map()), window_(m) {
    window_.reset(mission_.agent());
  }

  const Mission& mission() const { return mission_; }
  const AreaGraph& graph() const { return graph_; }
  const MoveWindow& window() const { return window_; }

  std::vector<SimEvent> act(const Action& a) {
    auto events = mission_.apply(a);
    fold(events);
    return events;
  }

  // Re-executes the recorded action at events[at], verifying it.
  std::vector<SimEvent> replay(std::span<const SimEvent> events, std::size_t at) {
    auto produced = replay_action(mission_, events, at);
    fold(produced);
    return produced;
  }

  std::vector<GoalCandidate> goals() const { return enumerate_goals(mission_, mission_.area()); }

  // A frame can be built once the window is full; goal prediction needs two
  // or more candidates.
  bool frame_ready() const { return window_.full(); }
  bool goal_eligible() const { return window_.full() && goals().size() >= 2; }

  FeatureFrame frame(const Normalization& norm = {}) const { return build_frame(mission_, graph_, window_, norm); }

 private:
  void fold(std::span<const SimEvent> events) {
    for (const SimEvent& e : events) {
      if (e.kind == EventKind::move) window_.push(e.pos);
      graph_.apply(mission_.map(), e);
    }
  }

  Mission mission_;
  AreaGraph graph_;
  MoveWindow window_;
};

// --- Serialization (one JSON object per line) ---

inline json frame_to_json(const FeatureFrame& f) {
  json j;
  j["dmd"] = f.dmd;
  j["mask"] = f.mask;
  j["lowres"] = f.lowres;
  j["locations"] = f.locations;
  j["goal_label"] = f.goal_label ? json(*f.goal_label) : json(nullptr);
  j["victim_label"] = f.victim_label ? json(*f.victim_label) : json(nullptr);
  j["t"] = f.t;
  j["trial_id"] = f.trial_id;
  j["area_id"] = f.area_id;
  j["area_index"] = f.area_index;
  j["m"] = f.m;
  return j;
}

inline FeatureFrame frame_from_json(const json& j) {
  FeatureFrame f;
  f.dmd = j.at("dmd").get<std::array<double, kMaxGoals>>();
  f.mask = j.at("mask").get<std::array<std::uint8_t, kMaxGoals>>();
  f.lowres = j.at("lowres").get<std::vector<double>>();
  f.locations = j.value("locations", std::vector<double>{});
  if (!j.at("goal_label").is_null()) f.goal_label = j["goal_label"].get<int>();
  if (!j.at("victim_label").is_null()) f.victim_label = j["victim_label"].get<int>();
  f.t = j.at("t").get<double>();
  f.trial_id = j.value("trial_id", "");
  f.area_id = j.value("area_id", 0);
  f.area_index = j.value("area_index", 0);
  f.m = j.value("m", 6);
  return f;
}

}  // namespace usar
