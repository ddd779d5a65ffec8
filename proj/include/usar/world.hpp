#pragma once

// High-resolution gridworld: map loading, mission rules, event log, replay.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace usar {

using json = nlohmann::json;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MapError : public Error {
 public:
  using Error::Error;
};

// An action the current state does not admit (blocked triage, mission over).
class ActionError : public Error {
 public:
  using Error::Error;
};

class ReplayDivergence : public Error {
 public:
  ReplayDivergence(std::size_t index, const std::string& what)
      : Error("replay diverged at event " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

// Integer cell encoding of the high-resolution grid.
enum class CellCode : std::uint8_t {
  Agent = 0,
  Empty = 1,
  Wall = 4,
  CriticalVictim = 81,
  NonCriticalVictim = 82,
  UnavailableVictim = 83,
  Obstacle = 255,
};

inline bool is_valid_cell_code(int v) {
  return v == 0 || v == 1 || v == 4 || v == 81 || v == 82 || v == 83 || v == 255;
}

struct Coord {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

inline int manhattan(Coord a, Coord b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col); }

enum class Direction : std::uint8_t { up, down, left, right };

// Fixed order used for tie-breaking everywhere (path search, noise moves).
inline constexpr std::array<Direction, 4> kDirections = {Direction::up, Direction::down, Direction::left,
                                                         Direction::right};

inline Coord step(Coord c, Direction d) {
  switch (d) {
    case Direction::up: return {c.row - 1, c.col};
    case Direction::down: return {c.row + 1, c.col};
    case Direction::left: return {c.row, c.col - 1};
    case Direction::right: return {c.row, c.col + 1};
  }
  return c;
}

inline std::string_view to_string(Direction d) {
  constexpr std::array<std::string_view, 4> names = {"up", "down", "left", "right"};
  return names[static_cast<std::size_t>(d)];
}

inline Direction parse_direction(std::string_view s) {
  for (Direction d : kDirections)
    if (to_string(d) == s) return d;
  throw Error("unknown direction '" + std::string(s) + "'");
}

enum class Color : std::uint8_t { yellow, green };

inline std::string_view to_string(Color c) { return c == Color::yellow ? "yellow" : "green"; }

inline Color parse_color(std::string_view s) {
  if (s == "yellow") return Color::yellow;
  if (s == "green") return Color::green;
  throw Error("unknown victim color '" + std::string(s) + "'");
}

enum class VictimStatus : std::uint8_t { waiting, triaged, expired };

struct Victim {
  int id = 0;
  Coord cell;
  Color color = Color::green;
};

struct Area {
  int id = 0;
  std::string name;
  std::vector<Coord> cells;
};

struct Portal {
  int id = 0;
  Coord cell;
  std::array<int, 2> areas{};  // area ids
};

// Upper bound on candidate goals (portals + victims) in one area.
inline constexpr int kMaxGoals = 16;

inline std::string where(Coord c) { return "(" + std::to_string(c.row) + "," + std::to_string(c.col) + ")"; }

// Static description of a mission map. Areas, portals and victims are kept
// in ascending id order; that order is the canonical index space used by the
// area graph and the network input layout.
struct GridMap {
  std::string id;
  int height = 51;
  int width = 91;
  std::vector<CellCode> terrain;  // Empty / Wall / Obstacle
  std::vector<Victim> victims;
  std::vector<Area> areas;
  std::vector<Portal> portals;
  Coord spawn;

  // Derived lookups, filled by finalize().
  std::vector<int> area_of;    // per cell: area index or -1
  std::vector<int> victim_of;  // per cell: victim index or -1
  std::vector<std::vector<int>> area_portals;  // per area index: portal indices, ascending id
  std::vector<std::vector<int>> area_victims;  // per area index: victim indices, row-major cell order
  std::vector<int> victim_area;                // per victim index: area index

  bool in_bounds(Coord c) const { return c.row >= 0 && c.col >= 0 && c.row < height && c.col < width; }
  std::size_t flat(Coord c) const { return static_cast<std::size_t>(c.row) * width + c.col; }
  CellCode terrain_at(Coord c) const { return terrain[flat(c)]; }
  bool walkable(Coord c) const {
    if (!in_bounds(c)) return false;
    const CellCode t = terrain_at(c);
    return t != CellCode::Wall && t != CellCode::Obstacle;
  }
  int area_at(Coord c) const { return in_bounds(c) ? area_of[flat(c)] : -1; }
  int num_areas() const { return static_cast<int>(areas.size()); }

  int area_index(int area_id) const {
    for (std::size_t i = 0; i < areas.size(); ++i)
      if (areas[i].id == area_id) return static_cast<int>(i);
    throw Error("unknown area id " + std::to_string(area_id));
  }
  int victim_index(int victim_id) const {
    for (std::size_t i = 0; i < victims.size(); ++i)
      if (victims[i].id == victim_id) return static_cast<int>(i);
    throw Error("unknown victim id " + std::to_string(victim_id));
  }
  int portal_index(int portal_id) const {
    for (std::size_t i = 0; i < portals.size(); ++i)
      if (portals[i].id == portal_id) return static_cast<int>(i);
    throw Error("unknown portal id " + std::to_string(portal_id));
  }

  int count(Color c) const {
    return static_cast<int>(std::count_if(victims.begin(), victims.end(), [c](const Victim& v) { return v.color == c; }));
  }

  // Validates invariants and builds the derived lookups. Throws MapError.
  void finalize();
};

inline void GridMap::finalize() {
  if (height <= 0 || width <= 0) throw MapError("map dimensions must be positive");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (terrain.size() != n) throw MapError("terrain size does not match dimensions");

  std::sort(areas.begin(), areas.end(), [](const Area& a, const Area& b) { return a.id < b.id; });
  std::sort(portals.begin(), portals.end(), [](const Portal& a, const Portal& b) { return a.id < b.id; });
  std::sort(victims.begin(), victims.end(), [](const Victim& a, const Victim& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < areas.size(); ++i)
    if (areas[i].id == areas[i - 1].id) throw MapError("duplicate area id " + std::to_string(areas[i].id));
  for (std::size_t i = 1; i < portals.size(); ++i)
    if (portals[i].id == portals[i - 1].id) throw MapError("duplicate portal id " + std::to_string(portals[i].id));
  for (std::size_t i = 1; i < victims.size(); ++i)
    if (victims[i].id == victims[i - 1].id) throw MapError("duplicate victim id " + std::to_string(victims[i].id));

  // A map without declared areas is one implicit area covering every walkable cell.
  if (areas.empty()) {
    Area all{0, "world", {}};
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        if (walkable({r, c})) all.cells.push_back({r, c});
    areas.push_back(std::move(all));
  }

  area_of.assign(n, -1);
  for (std::size_t a = 0; a < areas.size(); ++a) {
    auto& cells = areas[a].cells;
    std::erase_if(cells, [&](Coord c) { return in_bounds(c) && !walkable(c); });
    for (Coord c : cells) {
      if (!in_bounds(c)) throw MapError("area " + std::to_string(areas[a].id) + " cell " + where(c) + " out of bounds");
      int& slot = area_of[flat(c)];
      if (slot >= 0 && slot != static_cast<int>(a))
        throw MapError("cell " + where(c) + " belongs to areas " + std::to_string(areas[slot].id) + " and " +
                       std::to_string(areas[a].id));
      slot = static_cast<int>(a);
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  }
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      if (walkable({r, c}) && area_of[flat({r, c})] < 0)
        throw MapError("walkable cell " + where({r, c}) + " belongs to no area");

  if (!in_bounds(spawn) || !walkable(spawn)) throw MapError("spawn " + where(spawn) + " is not walkable");

  victim_of.assign(n, -1);
  victim_area.assign(victims.size(), -1);
  for (std::size_t v = 0; v < victims.size(); ++v) {
    const Coord c = victims[v].cell;
    const std::string label = "victim " + std::to_string(victims[v].id) + " at " + where(c);
    if (!in_bounds(c)) throw MapError(label + " is out of bounds");
    if (!walkable(c)) throw MapError(label + " is on a non-walkable cell");
    if (victim_of[flat(c)] >= 0) throw MapError(label + " shares its cell with another victim");
    victim_of[flat(c)] = static_cast<int>(v);
    victim_area[v] = area_of[flat(c)];
  }

  std::set<std::pair<int, int>> connected;  // area index pairs joined by a portal
  for (const Portal& p : portals) {
    const std::string label = "portal " + std::to_string(p.id) + " at " + where(p.cell);
    if (!in_bounds(p.cell) || !walkable(p.cell)) throw MapError(label + " is not on a walkable cell");
    if (p.areas[0] == p.areas[1]) throw MapError(label + " joins an area to itself");
    int a = -1, b = -1;
    try {
      a = area_index(p.areas[0]);
      b = area_index(p.areas[1]);
    } catch (const Error& e) {
      throw MapError(label + ": " + e.what());
    }
    std::set<int> touching = {area_of[flat(p.cell)]};
    for (Direction d : kDirections) {
      const Coord nb = step(p.cell, d);
      if (walkable(nb)) touching.insert(area_of[flat(nb)]);
    }
    if (!touching.contains(a) || !touching.contains(b))
      throw MapError(label + " is not on the boundary between areas " + std::to_string(p.areas[0]) + " and " +
                     std::to_string(p.areas[1]));
    connected.insert(std::minmax(a, b));
  }

  // Every place where the agent can cross from one area to another must be
  // covered by a portal so that area transitions follow graph edges.
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const Coord here{r, c};
      if (!walkable(here)) continue;
      for (Direction d : {Direction::down, Direction::right}) {
        const Coord nb = step(here, d);
        if (!walkable(nb)) continue;
        const int a = area_of[flat(here)], b = area_of[flat(nb)];
        if (a != b && !connected.contains(std::minmax(a, b)))
          throw MapError("cells " + where(here) + " and " + where(nb) + " join areas " + std::to_string(areas[a].id) +
                         " and " + std::to_string(areas[b].id) + " without a portal");
      }
    }

  area_portals.assign(areas.size(), {});
  area_victims.assign(areas.size(), {});
  for (std::size_t p = 0; p < portals.size(); ++p)
    for (int id : portals[p].areas) area_portals[area_index(id)].push_back(static_cast<int>(p));
  for (std::size_t v = 0; v < victims.size(); ++v) area_victims[victim_area[v]].push_back(static_cast<int>(v));
  for (auto& list : area_victims)
    std::sort(list.begin(), list.end(), [&](int x, int y) { return victims[x].cell < victims[y].cell; });

  for (std::size_t a = 0; a < areas.size(); ++a) {
    const std::size_t goals = area_portals[a].size() + area_victims[a].size();
    if (goals > static_cast<std::size_t>(kMaxGoals))
      throw MapError("area " + std::to_string(areas[a].id) + " has " + std::to_string(goals) +
                     " candidate goals; at most " + std::to_string(kMaxGoals) + " are supported");
  }
}

namespace detail {

inline Coord parse_coord(const json& j) {
  if (j.is_array() && j.size() == 2) return {j[0].get<int>(), j[1].get<int>()};
  if (j.is_object()) return {j.at("row").get<int>(), j.at("col").get<int>()};
  throw MapError("expected a cell as [row, col] or {row, col}, got " + j.dump());
}

// A list entry is either a single cell [r, c] or an inclusive rectangle [r0, c0, r1, c1].
inline void append_cells(const json& list, std::vector<Coord>& out) {
  for (const json& e : list) {
    if (e.is_array() && e.size() == 4) {
      const int r0 = e[0], c0 = e[1], r1 = e[2], c1 = e[3];
      for (int r = std::min(r0, r1); r <= std::max(r0, r1); ++r)
        for (int c = std::min(c0, c1); c <= std::max(c0, c1); ++c) out.push_back({r, c});
    } else {
      out.push_back(parse_coord(e));
    }
  }
}

}  // namespace detail

inline GridMap parse_map(const json& doc, std::string id = {}) {
  GridMap map;
  try {
    if (!doc.is_object()) throw MapError("map document must be a JSON object");
    map.id = doc.contains("id") ? doc["id"].get<std::string>() : std::move(id);
    map.height = doc.value("height", 51);
    map.width = doc.value("width", 91);
    if (map.height <= 0 || map.width <= 0) throw MapError("map dimensions must be positive");
    map.terrain.assign(static_cast<std::size_t>(map.height) * map.width, CellCode::Empty);

    auto paint = [&](const char* key, CellCode code) {
      if (!doc.contains(key)) return;
      std::vector<Coord> cells;
      detail::append_cells(doc[key], cells);
      for (Coord c : cells) {
        if (!map.in_bounds(c)) throw MapError(std::string(key) + " cell " + where(c) + " out of bounds");
        map.terrain[map.flat(c)] = code;
      }
    };
    paint("walls", CellCode::Wall);
    paint("obstacles", CellCode::Obstacle);

    for (const json& v : doc.value("victims", json::array())) {
      Victim victim;
      victim.id = v.at("id").get<int>();
      victim.cell = {v.at("row").get<int>(), v.at("col").get<int>()};
      victim.color = parse_color(v.at("color").get<std::string>());
      map.victims.push_back(victim);
    }
    for (const json& a : doc.value("areas", json::array())) {
      Area area;
      area.id = a.at("id").get<int>();
      area.name = a.value("name", "area " + std::to_string(area.id));
      if (a.contains("cells")) detail::append_cells(a["cells"], area.cells);
      if (a.contains("rects")) detail::append_cells(a["rects"], area.cells);
      map.areas.push_back(std::move(area));
    }
    for (const json& p : doc.value("portals", json::array())) {
      Portal portal;
      portal.id = p.at("id").get<int>();
      portal.cell = {p.at("row").get<int>(), p.at("col").get<int>()};
      const json& pair = p.at("areas");
      if (!pair.is_array() || pair.size() != 2)
        throw MapError("portal " + std::to_string(portal.id) + " must name exactly two areas");
      portal.areas = {pair[0].get<int>(), pair[1].get<int>()};
      map.portals.push_back(portal);
    }
    map.spawn = detail::parse_coord(doc.at("spawn"));
  } catch (const json::exception& e) {
    throw MapError(std::string("malformed map document: ") + e.what());
  } catch (const MapError&) {
    throw;
  } catch (const Error& e) {
    throw MapError(std::string("malformed map document: ") + e.what());
  }
  map.finalize();
  return map;
}

inline GridMap load_map_string(std::string_view text, std::string id = {}) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw MapError(std::string("malformed map document: ") + e.what());
  }
  return parse_map(doc, std::move(id));
}

inline GridMap load_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MapError("cannot open map " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return load_map_string(buf.str(), path.stem().string());
}

inline json map_to_json(const GridMap& map) {
  json doc;
  doc["v"] = 1;
  doc["id"] = map.id;
  doc["height"] = map.height;
  doc["width"] = map.width;
  json walls = json::array(), obstacles = json::array();
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c) {
      const CellCode t = map.terrain_at({r, c});
      if (t == CellCode::Wall) walls.push_back({r, c});
      if (t == CellCode::Obstacle) obstacles.push_back({r, c});
    }
  doc["walls"] = std::move(walls);
  doc["obstacles"] = std::move(obstacles);
  doc["victims"] = json::array();
  for (const Victim& v : map.victims)
    doc["victims"].push_back({{"id", v.id}, {"row", v.cell.row}, {"col", v.cell.col}, {"color", to_string(v.color)}});
  doc["areas"] = json::array();
  for (const Area& a : map.areas) {
    json cells = json::array();
    for (Coord c : a.cells) cells.push_back({c.row, c.col});
    doc["areas"].push_back({{"id", a.id}, {"name", a.name}, {"cells", std::move(cells)}});
  }
  doc["portals"] = json::array();
  for (const Portal& p : map.portals)
    doc["portals"].push_back({{"id", p.id}, {"row", p.cell.row}, {"col", p.cell.col}, {"areas", p.areas}});
  doc["spawn"] = {map.spawn.row, map.spawn.col};
  return doc;
}

// --- Events ---

enum class EventKind : std::uint8_t { move, triage_start, triage_complete, area_enter, expiry };

inline std::string_view to_string(EventKind k) {
  constexpr std::array<std::string_view, 5> names = {"move", "triage_start", "triage_complete", "area_enter",
                                                     "expiry"};
  return names[static_cast<std::size_t>(k)];
}

inline EventKind parse_event_kind(std::string_view s) {
  for (int i = 0; i < 5; ++i)
    if (to_string(static_cast<EventKind>(i)) == s) return static_cast<EventKind>(i);
  throw Error("unknown event kind '" + std::string(s) + "'");
}

struct SimEvent {
  EventKind kind = EventKind::move;
  double t = 0.0;
  // move
  Direction dir = Direction::up;
  Coord pos;  // agent cell after the move
  bool blocked = false;
  // triage_start, triage_complete, expiry
  int victim = -1;
  Color color = Color::green;
  // area_enter (ids)
  int from_area = -1;
  int to_area = -1;
  int portal = -1;

  friend bool operator==(const SimEvent&, const SimEvent&) = default;
};

inline json event_to_json(const SimEvent& e) {
  json payload;
  switch (e.kind) {
    case EventKind::move:
      payload = {{"dir", to_string(e.dir)}, {"row", e.pos.row}, {"col", e.pos.col}, {"blocked", e.blocked}};
      break;
    case EventKind::triage_start:
    case EventKind::expiry: payload = {{"victim", e.victim}}; break;
    case EventKind::triage_complete: payload = {{"victim", e.victim}, {"color", to_string(e.color)}}; break;
    case EventKind::area_enter: payload = {{"from", e.from_area}, {"to", e.to_area}, {"portal", e.portal}}; break;
  }
  return {{"kind", to_string(e.kind)}, {"t", e.t}, {"payload", std::move(payload)}};
}

inline SimEvent event_from_json(const json& j) {
  SimEvent e;
  e.kind = parse_event_kind(j.at("kind").get<std::string>());
  e.t = j.at("t").get<double>();
  const json& p = j.at("payload");
  switch (e.kind) {
    case EventKind::move:
      e.dir = parse_direction(p.at("dir").get<std::string>());
      e.pos = {p.at("row").get<int>(), p.at("col").get<int>()};
      e.blocked = p.at("blocked").get<bool>();
      break;
    case EventKind::triage_start:
    case EventKind::expiry: e.victim = p.at("victim").get<int>(); break;
    case EventKind::triage_complete:
      e.victim = p.at("victim").get<int>();
      e.color = parse_color(p.at("color").get<std::string>());
      break;
    case EventKind::area_enter:
      e.from_area = p.at("from").get<int>();
      e.to_area = p.at("to").get<int>();
      e.portal = p.at("portal").get<int>();
      break;
  }
  return e;
}

// --- Mission ---

struct MissionConfig {
  double move_duration = 0.25;
  double limit = 600.0;
  double expiry_time = 300.0;
  double yellow_triage = 15.0;
  double green_triage = 7.5;
  int yellow_points = 30;
  int green_points = 10;
};

struct Action {
  enum class Kind : std::uint8_t { move, triage } kind = Kind::move;
  Direction dir = Direction::up;

  static Action move_to(Direction d) { return {Kind::move, d}; }
  static Action do_triage() { return {Kind::triage, Direction::up}; }
  friend bool operator==(const Action&, const Action&) = default;
};

// Mutable mission state over an immutable shared map. Copies are cheap
// snapshots that share the map.
class Mission {
 public:
  explicit Mission(std::shared_ptr<const GridMap> map, MissionConfig config = {})
      : map_(std::move(map)), config_(config) {
    if (!map_) throw Error("mission requires a map");
    agent_ = map_->spawn;
    area_ = map_->area_at(agent_);
    status_.assign(map_->victims.size(), VictimStatus::waiting);
    cells_ = render();
  }

  const GridMap& map() const { return *map_; }
  std::shared_ptr<const GridMap> shared_map() const { return map_; }
  const MissionConfig& config() const { return config_; }
  Coord agent() const { return agent_; }
  int area() const { return area_; }
  double time() const { return t_; }
  int score() const { return score_; }
  bool over() const { return t_ >= config_.limit; }
  bool expiry_fired() const { return expired_fired_; }
  const std::vector<VictimStatus>& statuses() const { return status_; }
  VictimStatus status(int victim_index) const { return status_[victim_index]; }
  const std::vector<CellCode>& cells() const { return cells_; }
  CellCode cell(Coord c) const { return cells_[map_->flat(c)]; }

  // Index of the waiting victim under the agent, or -1.
  int victim_here() const {
    const int v = map_->victim_of[map_->flat(agent_)];
    return v >= 0 && status_[v] == VictimStatus::waiting ? v : -1;
  }

  std::size_t count(VictimStatus s) const { return static_cast<std::size_t>(std::count(status_.begin(), status_.end(), s)); }

  std::size_t count(VictimStatus s, Color c) const {
    std::size_t n = 0;
    for (std::size_t v = 0; v < status_.size(); ++v)
      if (status_[v] == s && map_->victims[v].color == c) ++n;
    return n;
  }

  std::vector<SimEvent> move(Direction dir) {
    if (over()) throw ActionError("mission time exhausted");
    std::vector<SimEvent> out;
    const Coord target = step(agent_, dir);
    const bool blocked = !map_->walkable(target);
    const Coord from = agent_;
    t_ += config_.move_duration;
    if (!blocked) {
      set_agent(target);
    }
    SimEvent ev;
    ev.kind = EventKind::move;
    ev.t = t_;
    ev.dir = dir;
    ev.pos = agent_;
    ev.blocked = blocked;
    out.push_back(ev);

    const int to_area = map_->area_at(agent_);
    if (!blocked && to_area != area_) {
      SimEvent enter;
      enter.kind = EventKind::area_enter;
      enter.t = t_;
      enter.from_area = map_->areas[area_].id;
      enter.to_area = map_->areas[to_area].id;
      enter.portal = crossing_portal(area_, to_area, from);
      out.push_back(enter);
      area_ = to_area;
    }
    fire_expiry(out);
    return out;
  }

  std::vector<SimEvent> apply(const Action& a) { return a.kind == Action::Kind::move ? move(a.dir) : triage(); }

  std::vector<SimEvent> triage() {
    if (over()) throw ActionError("mission time exhausted");
    const int v = map_->victim_of[map_->flat(agent_)];
    if (v < 0) throw ActionError("no victim at " + where(agent_));
    if (status_[v] == VictimStatus::expired) throw ActionError("victim " + std::to_string(map_->victims[v].id) + " has expired");
    if (status_[v] == VictimStatus::triaged)
      throw ActionError("victim " + std::to_string(map_->victims[v].id) + " was already triaged");
    const Victim& victim = map_->victims[v];

    std::vector<SimEvent> out;
    SimEvent start;
    start.kind = EventKind::triage_start;
    start.t = t_;
    start.victim = victim.id;
    out.push_back(start);

    const bool yellow = victim.color == Color::yellow;
    t_ += yellow ? config_.yellow_triage : config_.green_triage;
    score_ += yellow ? config_.yellow_points : config_.green_points;
    status_[v] = VictimStatus::triaged;
    refresh(victim.cell);

    SimEvent done;
    done.kind = EventKind::triage_complete;
    done.t = t_;
    done.victim = victim.id;
    done.color = victim.color;
    out.push_back(done);
    fire_expiry(out);
    return out;
  }

  // Cell codes rebuilt from the static map, victim statuses and agent position.
  std::vector<CellCode> render() const {
    std::vector<CellCode> cells = map_->terrain;
    for (std::size_t v = 0; v < status_.size(); ++v)
      cells[map_->flat(map_->victims[v].cell)] = victim_code(static_cast<int>(v));
    cells[map_->flat(agent_)] = CellCode::Agent;
    return cells;
  }

  friend bool operator==(const Mission& a, const Mission& b) {
    return a.map_ == b.map_ && a.agent_ == b.agent_ && a.area_ == b.area_ && a.t_ == b.t_ && a.score_ == b.score_ &&
           a.status_ == b.status_ && a.cells_ == b.cells_ && a.expired_fired_ == b.expired_fired_;
  }

 private:
  CellCode victim_code(int v) const {
    if (status_[v] != VictimStatus::waiting) return CellCode::UnavailableVictim;
    return map_->victims[v].color == Color::yellow ? CellCode::CriticalVictim : CellCode::NonCriticalVictim;
  }

  CellCode static_code(Coord c) const {
    const int v = map_->victim_of[map_->flat(c)];
    return v >= 0 ? victim_code(v) : map_->terrain_at(c);
  }

  void refresh(Coord c) { cells_[map_->flat(c)] = c == agent_ ? CellCode::Agent : static_code(c); }

  void set_agent(Coord c) {
    const Coord old = agent_;
    agent_ = c;
    refresh(old);
    refresh(c);
  }

  // The portal joining the two areas closest to the cell the agent left.
  int crossing_portal(int from_area, int to_area, Coord from) const {
    int best = -1, best_dist = 0;
    for (int p : map_->area_portals[from_area]) {
      const Portal& portal = map_->portals[p];
      const int other = map_->area_index(portal.areas[0]) == from_area ? map_->area_index(portal.areas[1])
                                                                        : map_->area_index(portal.areas[0]);
      if (other != to_area) continue;
      const int d = manhattan(portal.cell, from);
      if (best < 0 || d < best_dist) {
        best = portal.id;
        best_dist = d;
      }
    }
    return best;
  }

  void fire_expiry(std::vector<SimEvent>& out) {
    if (expired_fired_ || t_ < config_.expiry_time) return;
    expired_fired_ = true;
    for (std::size_t v = 0; v < status_.size(); ++v) {
      if (status_[v] != VictimStatus::waiting || map_->victims[v].color != Color::yellow) continue;
      status_[v] = VictimStatus::expired;
      refresh(map_->victims[v].cell);
      SimEvent ev;
      ev.kind = EventKind::expiry;
      ev.t = t_;
      ev.victim = map_->victims[v].id;
      out.push_back(ev);
    }
  }

  std::shared_ptr<const GridMap> map_;
  MissionConfig config_;
  Coord agent_;
  int area_ = 0;
  double t_ = 0.0;
  int score_ = 0;
  bool expired_fired_ = false;
  std::vector<VictimStatus> status_;
  std::vector<CellCode> cells_;
};

// --- Trajectory log ---

struct TrajectoryLog {
  std::string trial_id;
  std::string map_id;
  std::string difficulty;
  json meta = json::object();  // policy parameters and other provenance
  std::vector<SimEvent> events;
};

inline void write_log(std::ostream& out, const TrajectoryLog& log) {
  json header = {{"kind", "header"},
                 {"t", 0.0},
                 {"payload",
                  {{"v", 1},
                   {"trial_id", log.trial_id},
                   {"map_id", log.map_id},
                   {"difficulty", log.difficulty},
                   {"meta", log.meta}}}};
  out << header.dump() << '\n';
  for (const SimEvent& e : log.events) out << event_to_json(e).dump() << '\n';
}

inline TrajectoryLog read_log(std::istream& in) {
  TrajectoryLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.at("kind") == "header") {
        const json& p = j.at("payload");
        if (p.value("v", 1) != 1) throw Error("unsupported log version");
        log.trial_id = p.value("trial_id", "");
        log.map_id = p.value("map_id", "");
        log.difficulty = p.value("difficulty", "");
        log.meta = p.value("meta", json::object());
        continue;
      }
      log.events.push_back(event_from_json(j));
    } catch (const json::exception& e) {
      throw Error("malformed log record on line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return log;
}

inline void save_log(const std::filesystem::path& path, const TrajectoryLog& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write log " + path.string());
  write_log(out, log);
  if (!out) throw Error("failed writing log " + path.string());
}

inline TrajectoryLog load_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open log " + path.string());
  return read_log(in);
}

// --- Replay ---

// Re-executes the action that starts at events[at] and verifies that the
// simulation reproduces the recorded events. Returns the produced events.
inline std::vector<SimEvent> replay_action(Mission& mission, std::span<const SimEvent> events, std::size_t at) {
  const SimEvent& head = events[at];
  std::vector<SimEvent> produced;
  try {
    if (head.kind == EventKind::move)
      produced = mission.move(head.dir);
    else if (head.kind == EventKind::triage_start)
      produced = mission.triage();
    else
      throw ReplayDivergence(at, std::string(to_string(head.kind)) + " event without a preceding action");
  } catch (const ActionError& e) {
    throw ReplayDivergence(at, e.what());
  }
  for (std::size_t k = 0; k < produced.size(); ++k) {
    if (at + k >= events.size())
      throw ReplayDivergence(at + k, "log ended but simulation produced " + std::string(to_string(produced[k].kind)));
    if (!(produced[k] == events[at + k]))
      throw ReplayDivergence(at + k, "recorded " + event_to_json(events[at + k]).dump() + " but simulation produced " +
                                         event_to_json(produced[k]).dump());
  }
  return produced;
}

// Steps through a recorded event stream one action at a time.
class Replayer {
 public:
  Replayer(std::shared_ptr<const GridMap> map, std::span<const SimEvent> events, MissionConfig config = {})
      : mission_(std::move(map), config), events_(events) {}

  bool done() const { return pos_ >= events_.size(); }
  std::size_t position() const { return pos_; }
  const Mission& mission() const { return mission_; }

  std::span<const SimEvent> next() {
    const std::size_t at = pos_;
    pos_ += replay_action(mission_, events_, at).size();
    return events_.subspan(at, pos_ - at);
  }

 private:
  Mission mission_;
  std::span<const SimEvent> events_;
  std::size_t pos_ = 0;
};

inline Mission replay(const TrajectoryLog& log, std::shared_ptr<const GridMap> map, MissionConfig config = {}) {
  Replayer r(std::move(map), log.events, config);
  while (!r.done()) r.next();
  return r.mission();
}

}  // namespace usar
