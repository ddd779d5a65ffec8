#pragma once

// Scripted stochastic rescuers used to generate synthetic corpora with
// distinguishable long-term strategies.

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "usar/areagraph.hpp"
#include "usar/datapipe.hpp"
#include "usar/rng.hpp"
#include "usar/world.hpp"

namespace usar {

enum class PolicyKind : std::uint8_t { yellow_first, opportunistic, sweeper };

inline constexpr std::array<PolicyKind, 3> kAllPolicies = {PolicyKind::yellow_first, PolicyKind::opportunistic,
                                                           PolicyKind::sweeper};

inline std::string_view to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::yellow_first: return "yellow_first";
    case PolicyKind::opportunistic: return "opportunistic";
    case PolicyKind::sweeper: return "sweeper";
  }
  return "?";
}

inline PolicyKind parse_policy(std::string_view s) {
  for (PolicyKind k : kAllPolicies)
    if (to_string(k) == s) return k;
  throw Error("unknown policy '" + std::string(s) + "'");
}

struct PolicyParams {
  PolicyKind kind = PolicyKind::opportunistic;
  double noise_eps = 0.0;
  std::uint64_t seed = 0;
};

// Breadth-first search over the 4-connected walkable grid. Neighbors are
// expanded in the fixed direction order, so shortest paths are deterministic.
class DistanceField {
 public:
  DistanceField(const GridMap& map, Coord source) : map_(&map), source_(source) {
    const std::size_t n = static_cast<std::size_t>(map.height) * map.width;
    dist_.assign(n, -1);
    parent_.assign(n, -1);
    if (!map.walkable(source)) return;
    std::deque<Coord> queue{source};
    dist_[map.flat(source)] = 0;
    while (!queue.empty()) {
      const Coord c = queue.front();
      queue.pop_front();
      for (Direction d : kDirections) {
        const Coord nb = step(c, d);
        if (!map.walkable(nb) || dist_[map.flat(nb)] >= 0) continue;
        dist_[map.flat(nb)] = dist_[map.flat(c)] + 1;
        parent_[map.flat(nb)] = static_cast<int>(map.flat(c));
        queue.push_back(nb);
      }
    }
  }

  int distance(Coord c) const { return map_->in_bounds(c) ? dist_[map_->flat(c)] : -1; }
  bool reachable(Coord c) const { return distance(c) >= 0; }

  // Cells from the source to `to`, inclusive.
  std::vector<Coord> path_to(Coord to) const {
    if (!reachable(to)) throw Error("cell " + where(to) + " is unreachable from " + where(source_));
    std::vector<Coord> path;
    for (int at = static_cast<int>(map_->flat(to)); at >= 0; at = parent_[at])
      path.push_back({at / map_->width, at % map_->width});
    std::reverse(path.begin(), path.end());
    return path;
  }

  // Direction of the first move on the shortest path to `to`.
  std::optional<Direction> first_step(Coord to) const {
    const auto path = path_to(to);
    if (path.size() < 2) return std::nullopt;
    for (Direction d : kDirections)
      if (step(path[0], d) == path[1]) return d;
    return std::nullopt;
  }

 private:
  const GridMap* map_;
  Coord source_;
  std::vector<int> dist_;
  std::vector<int> parent_;
};

inline std::vector<Coord> shortest_path(const GridMap& map, Coord from, Coord to) {
  if (!map.walkable(from)) throw Error("path start " + where(from) + " is not walkable");
  if (!map.walkable(to)) throw Error("path target " + where(to) + " is not walkable");
  return DistanceField(map, from).path_to(to);
}

// Area visiting order of the sweeper: depth-first over the area graph from
// the spawn area, neighbors in canonical order.
inline std::vector<int> depth_first_areas(const GridMap& map) {
  const AreaGraph graph(map);
  std::vector<int> order;
  std::vector<bool> seen(map.areas.size(), false);
  std::vector<int> stack = {map.area_at(map.spawn)};
  while (!stack.empty()) {
    const int a = stack.back();
    stack.pop_back();
    if (seen[a]) continue;
    seen[a] = true;
    order.push_back(a);
    auto nb = graph.neighbors(a);
    for (auto it = nb.rbegin(); it != nb.rend(); ++it)
      if (!seen[*it]) stack.push_back(*it);
  }
  return order;
}

class ScriptedAgent {
 public:
  ScriptedAgent(const GridMap& map, PolicyParams params)
      : params_(params), rng_(params.seed), sweep_order_(depth_first_areas(map)), visited_(map.areas.size(), false) {
    if (params.noise_eps < 0.0 || params.noise_eps >= 0.5) throw Error("noise_eps must lie in [0, 0.5)");
  }

  const PolicyParams& params() const { return params_; }

  // Next primitive action, or nullopt when nothing useful is left to do.
  std::optional<Action> next_action(const Mission& mission) {
    if (mission.over()) return std::nullopt;
    const GridMap& map = mission.map();
    visited_[mission.area()] = true;

    const int here = mission.victim_here();
    if (here >= 0 && wants(mission, here)) return Action::do_triage();

    const DistanceField field(map, mission.agent());
    const std::optional<Coord> target = choose_target(mission, field);
    if (!target) return std::nullopt;
    const std::optional<Direction> dir = field.first_step(*target);
    if (!dir) return std::nullopt;

    Direction chosen = *dir;
    if (params_.noise_eps > 0.0 && rng_.bernoulli(params_.noise_eps)) {
      std::vector<Direction> open;
      for (Direction d : kDirections)
        if (map.walkable(step(mission.agent(), d))) open.push_back(d);
      if (!open.empty()) chosen = open[rng_.below(open.size())];
    }
    return Action::move_to(chosen);
  }

 private:
  bool yellow_phase(const Mission& m) const {
    return m.time() < m.config().expiry_time && m.count(VictimStatus::waiting, Color::yellow) > 0;
  }

  bool wants(const Mission& m, int v) const {
    const GridMap& map = m.map();
    switch (params_.kind) {
      case PolicyKind::yellow_first:
        return (map.victims[v].color == Color::yellow) == yellow_phase(m);
      case PolicyKind::opportunistic: return true;
      case PolicyKind::sweeper:
        return sweep_pos_ < sweep_order_.size() && map.victim_area[v] == sweep_order_[sweep_pos_];
    }
    return false;
  }

  // Nearest waiting victim satisfying `pred` (ties broken by victim index).
  template <typename Pred>
  std::optional<Coord> nearest_victim(const Mission& m, const DistanceField& field, Pred pred) const {
    const GridMap& map = m.map();
    int best = -1, best_d = 0;
    for (std::size_t v = 0; v < map.victims.size(); ++v) {
      if (m.status(static_cast<int>(v)) != VictimStatus::waiting || !pred(static_cast<int>(v))) continue;
      const int d = field.distance(map.victims[v].cell);
      if (d < 0) continue;
      if (best < 0 || d < best_d) {
        best = static_cast<int>(v);
        best_d = d;
      }
    }
    if (best < 0) return std::nullopt;
    return map.victims[best].cell;
  }

  std::optional<Coord> choose_target(const Mission& m, const DistanceField& field) {
    const GridMap& map = m.map();
    switch (params_.kind) {
      case PolicyKind::yellow_first: {
        const Color want = yellow_phase(m) ? Color::yellow : Color::green;
        return nearest_victim(m, field, [&](int v) { return map.victims[v].color == want; });
      }
      case PolicyKind::opportunistic: return nearest_victim(m, field, [](int) { return true; });
      case PolicyKind::sweeper: {
        while (sweep_pos_ < sweep_order_.size()) {
          const int area = sweep_order_[sweep_pos_];
          const bool has_waiting = std::any_of(map.area_victims[area].begin(), map.area_victims[area].end(),
                                               [&](int v) { return m.status(v) == VictimStatus::waiting; });
          if (visited_[area] && !has_waiting) {
            ++sweep_pos_;
            continue;
          }
          if (m.area() == area) {
            if (auto t = nearest_victim(m, field, [&](int v) { return map.victim_area[v] == area; })) return t;
            ++sweep_pos_;
            continue;
          }
          // Walk to the nearest cell of the next area in the sweep.
          std::optional<Coord> best;
          int best_d = 0;
          for (Coord c : map.areas[area].cells) {
            const int d = field.distance(c);
            if (d >= 0 && (!best || d < best_d)) {
              best = c;
              best_d = d;
            }
          }
          if (best) return best;
          ++sweep_pos_;
        }
        return std::nullopt;
      }
    }
    return std::nullopt;
  }

  PolicyParams params_;
  Rng rng_;
  std::vector<int> sweep_order_;
  std::size_t sweep_pos_ = 0;
  std::vector<bool> visited_;
};

inline TrajectoryLog run_trial(std::shared_ptr<const GridMap> map, const PolicyParams& policy, std::string trial_id,
                               std::string difficulty = {}, MissionConfig config = {}) {
  TrajectoryLog log;
  log.trial_id = std::move(trial_id);
  log.map_id = map->id;
  log.difficulty = std::move(difficulty);
  log.meta = {{"synthetic", true},
              {"policy", to_string(policy.kind)},
              {"noise_eps", policy.noise_eps},
              {"seed", policy.seed}};
  Mission mission(map, config);
  ScriptedAgent agent(*map, policy);
  while (auto action = agent.next_action(mission)) {
    auto events = mission.apply(*action);
    log.events.insert(log.events.end(), events.begin(), events.end());
  }
  return log;
}

struct CorpusSpec {
  std::vector<std::pair<PolicyKind, double>> mix = {
      {PolicyKind::yellow_first, 1.0}, {PolicyKind::opportunistic, 1.0}, {PolicyKind::sweeper, 1.0}};
  double noise_eps = 0.1;
  int trials = 66;
  std::uint64_t seed = 0;
  std::string difficulty;  // defaults to each map's id
};

// Trials cycle over the maps; policy kinds are allotted in proportion to the
// mix (largest remainder) and then shuffled with the corpus seed.
inline Corpus generate_corpus(const std::vector<std::shared_ptr<const GridMap>>& maps, const CorpusSpec& spec) {
  if (maps.empty()) throw Error("corpus generation needs at least one map");
  if (spec.trials < 6) throw Error("corpus generation needs at least 6 trials");
  if (spec.mix.empty()) throw Error("policy mix is empty");
  double total = 0.0;
  for (const auto& [kind, w] : spec.mix) {
    if (w < 0.0) throw Error("policy weights must be nonnegative");
    total += w;
  }
  if (total <= 0.0) throw Error("policy mix has zero total weight");

  std::vector<int> counts(spec.mix.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < spec.mix.size(); ++i) {
    const double exact = spec.trials * spec.mix[i].second / total;
    counts[i] = static_cast<int>(exact);
    assigned += counts[i];
    remainders.push_back({exact - counts[i], i});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < spec.trials; ++r, ++assigned) ++counts[remainders[r % remainders.size()].second];

  std::vector<PolicyKind> kinds;
  for (std::size_t i = 0; i < spec.mix.size(); ++i) kinds.insert(kinds.end(), counts[i], spec.mix[i].first);
  Rng rng(spec.seed);
  rng.shuffle(std::span(kinds));

  Corpus corpus;
  corpus.meta = {{"synthetic", true}, {"noise_eps", spec.noise_eps}, {"seed", spec.seed}, {"trials", spec.trials}};
  for (const auto& m : maps) corpus.maps[m->id] = m;
  for (int i = 0; i < spec.trials; ++i) {
    const auto& map = maps[i % maps.size()];
    PolicyParams p{kinds[i], spec.noise_eps, Rng::mix(spec.seed, static_cast<std::uint64_t>(i))};
    char id[32];
    std::snprintf(id, sizeof id, "trial_%03d", i);
    corpus.trials.push_back({run_trial(map, p, id, spec.difficulty.empty() ? map->id : spec.difficulty), map});
  }
  return corpus;
}

}  // namespace usar
