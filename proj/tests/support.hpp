#pragma once

// Shared fixtures: small hand-made maps, a random map generator and
// brute-force oracles that recompute derived quantities from raw logs.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "usar/usar.hpp"

namespace usar::test {

inline std::filesystem::path data_dir() { return USAR_DATA_DIR; }

inline std::shared_ptr<const GridMap> bundled(const std::string& name) {
  return std::make_shared<const GridMap>(load_map(data_dir() / "maps" / (name + ".json")));
}

inline std::shared_ptr<const GridMap> shared(GridMap m) { return std::make_shared<const GridMap>(std::move(m)); }

// 7x13, three areas in a row joined by portals on the wall columns:
//
//   #############
//   #...#...#...#
//   #...#...#...#
//   #...P...P...#      P = portal cell (belongs to the area on its left)
//   #...#...#...#
//   #...#...#...#
//   #############
inline json three_room_doc() {
  return json{{"id", "three"},
              {"height", 7},
              {"width", 13},
              {"walls", {{0, 0, 0, 12}, {6, 0, 6, 12}, {0, 0, 6, 0}, {0, 12, 6, 12}, {1, 4, 2, 4}, {4, 4, 5, 4}, {1, 8, 2, 8}, {4, 8, 5, 8}}},
              {"areas",
               {{{"id", 1}, {"name", "West"}, {"rects", {{1, 1, 5, 3}, {3, 4, 3, 4}}}},
                {{"id", 2}, {"name", "Middle"}, {"rects", {{1, 5, 5, 7}, {3, 8, 3, 8}}}},
                {{"id", 3}, {"name", "East"}, {"rects", {{1, 9, 5, 11}}}}}},
              {"portals", {{{"id", 1}, {"row", 3}, {"col", 4}, {"areas", {1, 2}}},
                           {{"id", 2}, {"row", 3}, {"col", 8}, {"areas", {2, 3}}}}},
              {"victims",
               {{{"id", 1}, {"row", 1}, {"col", 6}, {"color", "yellow"}},
                {{"id", 2}, {"row", 5}, {"col", 6}, {"color", "green"}},
                {{"id", 3}, {"row", 1}, {"col", 10}, {"color", "yellow"}},
                {{"id", 4}, {"row", 5}, {"col", 11}, {"color", "green"}},
                {{"id", 5}, {"row", 2}, {"col", 2}, {"color", "green"}}}},
              {"spawn", {3, 2}}};
}

inline std::shared_ptr<const GridMap> three_room() { return shared(parse_map(three_room_doc())); }

// Random band maps: vertical bands separated by wall columns with one door
// each, bands optionally split by a wall row with one door. Every door is a
// portal. A small fraction of interior cells become obstacles.
inline GridMap random_map(Rng& rng, int max_bands = 4, double obstacle_p = 0.06, int max_victims_per_area = 6) {
  const int H = 7 + static_cast<int>(rng.below(10));
  const int bands = 1 + static_cast<int>(rng.below(max_bands));
  std::vector<int> widths;
  for (int b = 0; b < bands; ++b) widths.push_back(3 + static_cast<int>(rng.below(6)));
  int W = 2 + bands - 1;
  for (int w : widths) W += w;

  std::vector<int> area(static_cast<std::size_t>(H) * W, -1);
  std::vector<bool> wall(area.size(), false);
  auto at = [&](int r, int c) { return static_cast<std::size_t>(r) * W + c; };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (r == 0 || c == 0 || r == H - 1 || c == W - 1) wall[at(r, c)] = true;

  struct Door {
    Coord cell;
    int a, b;
  };
  std::vector<Door> doors;
  std::vector<int> band_start, split_row(bands, -1);
  int next_id = 1;
  int col = 1;
  for (int b = 0; b < bands; ++b) {
    band_start.push_back(col);
    const int c0 = col, c1 = col + widths[b] - 1;
    const int upper = next_id++;
    int lower = upper;
    if (H >= 9 && rng.bernoulli(0.5)) {
      split_row[b] = 3 + static_cast<int>(rng.below(H - 6));
      lower = next_id++;
    }
    for (int r = 1; r < H - 1; ++r)
      for (int c = c0; c <= c1; ++c) {
        if (r == split_row[b]) {
          wall[at(r, c)] = true;
          continue;
        }
        area[at(r, c)] = split_row[b] >= 0 && r > split_row[b] ? lower : upper;
      }
    if (split_row[b] >= 0) {
      const int dc = c0 + static_cast<int>(rng.below(widths[b]));
      wall[at(split_row[b], dc)] = false;
      area[at(split_row[b], dc)] = upper;
      doors.push_back({{split_row[b], dc}, upper, lower});
    }
    col = c1 + 1;
    if (b + 1 < bands) {
      for (int r = 0; r < H; ++r) wall[at(r, col)] = true;
      ++col;
    }
  }
  for (int b = 0; b + 1 < bands; ++b) {
    const int x = band_start[b] + widths[b];
    int r;
    do r = 1 + static_cast<int>(rng.below(H - 2));
    while (r == split_row[b] || r == split_row[b + 1]);
    wall[at(r, x)] = false;
    const int left = area[at(r, x - 1)], right = area[at(r, x + 1)];
    area[at(r, x)] = left;
    doors.push_back({{r, x}, left, right});
  }

  std::vector<bool> obstacle(area.size(), false);
  auto near_door = [&](Coord c) {
    for (const Door& d : doors)
      if (manhattan(c, d.cell) <= 1) return true;
    return false;
  };
  for (int r = 1; r < H - 1; ++r)
    for (int c = 1; c < W - 1; ++c)
      if (!wall[at(r, c)] && !near_door({r, c}) && rng.bernoulli(obstacle_p)) obstacle[at(r, c)] = true;

  json doc = {{"id", "random"}, {"height", H}, {"width", W}};
  json walls = json::array(), obstacles = json::array();
  std::map<int, json> area_cells;
  std::map<int, std::vector<Coord>> free_cells;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (wall[at(r, c)]) {
        walls.push_back({r, c});
      } else if (obstacle[at(r, c)]) {
        obstacles.push_back({r, c});
      } else {
        area_cells[area[at(r, c)]].push_back({r, c});
        free_cells[area[at(r, c)]].push_back({r, c});
      }
    }
  doc["walls"] = walls;
  doc["obstacles"] = obstacles;
  doc["areas"] = json::array();
  for (auto& [id, cells] : area_cells) doc["areas"].push_back({{"id", id}, {"cells", cells}});
  doc["portals"] = json::array();
  int pid = 1;
  for (const Door& d : doors) doc["portals"].push_back({{"id", pid++}, {"row", d.cell.row}, {"col", d.cell.col}, {"areas", {d.a, d.b}}});

  doc["victims"] = json::array();
  int vid = 1;
  std::vector<Coord> spawn_pool;
  for (auto& [id, cells] : free_cells) {
    rng.shuffle(std::span(cells));
    const int n = static_cast<int>(rng.below(max_victims_per_area + 1));
    for (int i = 0; i < static_cast<int>(cells.size()); ++i) {
      if (i < n && !near_door(cells[i]))
        doc["victims"].push_back({{"id", vid++},
                                  {"row", cells[i].row},
                                  {"col", cells[i].col},
                                  {"color", rng.bernoulli(0.4) ? "yellow" : "green"}});
      else
        spawn_pool.push_back(cells[i]);
    }
  }
  const Coord spawn = spawn_pool[rng.below(spawn_pool.size())];
  doc["spawn"] = {spawn.row, spawn.col};
  return parse_map(doc);
}

// Uniformly random primitive actions; triage only where it is legal, with
// probability `triage_p`.
inline Action random_action(const Mission& m, Rng& rng, double triage_p = 0.5) {
  if (m.victim_here() >= 0 && rng.bernoulli(triage_p)) return Action::do_triage();
  return Action::move_to(kDirections[rng.below(4)]);
}

inline TrajectoryLog random_log(std::shared_ptr<const GridMap> map, Rng& rng, int actions, MissionConfig cfg = {}) {
  TrajectoryLog log;
  log.trial_id = "random";
  log.map_id = map->id;
  Mission m(map, cfg);
  for (int i = 0; i < actions && !m.over(); ++i) {
    auto ev = m.apply(random_action(m, rng));
    log.events.insert(log.events.end(), ev.begin(), ev.end());
  }
  return log;
}

// Agent positions after each move event in the log, preceded by the spawn.
inline std::vector<Coord> move_positions(const GridMap& map, const std::vector<SimEvent>& events, std::size_t upto) {
  std::vector<Coord> out = {map.spawn};
  for (std::size_t i = 0; i < upto; ++i)
    if (events[i].kind == EventKind::move) out.push_back(events[i].pos);
  return out;
}

}  // namespace usar::test
