#pragma once

// Live play sessions: a human drives a mission one action at a time and
// every post-move state is scored by a trained model. This header holds the
// transport-independent session logic; server.hpp puts it on the network.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "usar/datapipe.hpp"
#include "usar/features.hpp"
#include "usar/neural.hpp"
#include "usar/world.hpp"

namespace usar {

inline constexpr int kWireVersion = 1;

// A referenced map, model or session id is not registered.
class NotFound : public Error {
 public:
  using Error::Error;
};

// Model output for the current post-move state, with the candidate goals it refers to.
struct LivePrediction {
  double t = 0.0;
  std::vector<GoalCandidate> goals;
  Prediction prediction;
};

// Scores the tracker's state if a prediction is defined there: the window
// must be full and the area must offer at least two candidate goals.
inline std::optional<LivePrediction> predict_state(const MissionTracker& tracker, const ModelParams& model) {
  if (!tracker.goal_eligible()) return std::nullopt;
  LivePrediction out;
  out.t = tracker.mission().time();
  out.goals = tracker.goals();
  out.prediction = predict_one(model, tracker.frame(Normalization{model.manifest.count_scale}));
  return out;
}

// Replays a recorded log and yields one prediction per eligible move action;
// the offline counterpart of a live session.
inline std::vector<LivePrediction> predict_log(const TrajectoryLog& log, std::shared_ptr<const GridMap> map,
                                               const ModelParams& model, MissionConfig config = {}) {
  MissionTracker tracker(std::move(map), model.manifest.m, config);
  std::vector<LivePrediction> out;
  std::size_t pos = 0;
  while (pos < log.events.size()) {
    const bool is_move = log.events[pos].kind == EventKind::move;
    pos += tracker.replay(log.events, pos).size();
    if (!is_move) continue;
    if (auto p = predict_state(tracker, model)) out.push_back(std::move(*p));
  }
  return out;
}

// `t,p_0,...,p_15,p_yellow` with round-trip precision.
inline std::string format_prediction_line(const LivePrediction& p) {
  std::string line;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", p.t);
  line += buf;
  for (double v : p.prediction.goal_probs) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    line += buf;
  }
  std::snprintf(buf, sizeof buf, ",%.17g", p.prediction.p_yellow);
  line += buf;
  return line;
}

inline bool model_fits_map(const Manifest& m, const GridMap& map) {
  return m.variant == Variant::baseline_locations || m.n_areas == map.num_areas();
}

inline json cell_json(Coord c) { return json::array({c.row, c.col}); }

class Session {
 public:
  Session(std::string id, std::string map_id, std::shared_ptr<const GridMap> map, std::string model_id,
          std::shared_ptr<const ModelParams> model, MissionConfig config = {})
      : id_(std::move(id)),
        map_id_(std::move(map_id)),
        model_id_(std::move(model_id)),
        map_(std::move(map)),
        model_(std::move(model)),
        config_(config),
        tracker_(map_, model_->manifest.m, config) {
    if (!model_fits_map(model_->manifest, *map_))
      throw Error("model " + model_id_ + " expects " + std::to_string(model_->manifest.n_areas) + " areas but map " +
                  map_id_ + " has " + std::to_string(map_->num_areas()));
    log_.trial_id = id_;
    log_.map_id = map_id_;
    log_.difficulty = map_id_;
    log_.meta = {{"source", "live"}, {"model_id", model_id_}};
  }

  const std::string& id() const { return id_; }
  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  json snapshot() {
    std::lock_guard lock(mu_);
    return snapshot_locked();
  }

  // Processes one client message and returns the reply.
  json handle(const json& msg) {
    std::lock_guard lock(mu_);
    const std::string action = msg.value("action", "");
    if (closed_) return error_locked("session is closed");
    try {
      if (action == "move") return act_locked(Action::move_to(parse_direction(msg.at("dir").get<std::string>())));
      if (action == "triage") return act_locked(Action::do_triage());
      if (action == "snapshot") return snapshot_locked();
      if (action == "start") {
        if (msg.contains("map_id") && msg["map_id"] != map_id_)
          return error_locked("a session is bound to map " + map_id_ + "; open a new session for another map");
        restart_locked();
        return snapshot_locked();
      }
      if (action == "end") {
        json out = base_locked("closed");
        out["score"] = tracker_.mission().score();
        out["terminal"] = true;
        closed_ = true;
        return out;
      }
    } catch (const json::exception& e) {
      return error_locked(std::string("malformed message: ") + e.what());
    } catch (const Error& e) {
      return error_locked(e.what());
    }
    return error_locked("unknown action '" + action + "'");
  }

  // Marks the session closed and writes its log once; later calls return the same log.
  TrajectoryLog close(const std::optional<std::filesystem::path>& dir) {
    std::lock_guard lock(mu_);
    closed_ = true;
    if (dir && !persisted_) {
      std::filesystem::create_directories(*dir);
      save_log(*dir / (id_ + ".ndjson"), log_);
      persisted_ = true;
    }
    return log_;
  }

  TrajectoryLog log() const {
    std::lock_guard lock(mu_);
    return log_;
  }

 private:
  json base_locked(const char* type) {
    return {{"v", kWireVersion}, {"seq", ++seq_}, {"type", type}, {"session_id", id_}};
  }

  json error_locked(const std::string& what) {
    json out = base_locked("error");
    out["error"] = what;
    out["clock"] = tracker_.mission().time();
    out["score"] = tracker_.mission().score();
    return out;
  }

  bool terminal_locked() const {
    const Mission& m = tracker_.mission();
    return m.over() || m.count(VictimStatus::waiting) == 0;
  }

  json snapshot_locked() {
    const Mission& m = tracker_.mission();
    json out = base_locked("snapshot");
    out["map_id"] = map_id_;
    out["model_id"] = model_id_;
    out["height"] = map_->height;
    out["width"] = map_->width;
    std::vector<int> cells;
    cells.reserve(m.cells().size());
    for (CellCode c : m.cells()) cells.push_back(static_cast<int>(c));
    out["cells"] = std::move(cells);
    out["agent"] = cell_json(m.agent());
    out["area_id"] = map_->areas[m.area()].id;
    out["clock"] = m.time();
    out["score"] = m.score();
    out["victims"] = json::array();
    for (std::size_t v = 0; v < map_->victims.size(); ++v) {
      const Victim& victim = map_->victims[v];
      const VictimStatus s = m.status(static_cast<int>(v));
      out["victims"].push_back({{"id", victim.id},
                                {"cell", cell_json(victim.cell)},
                                {"color", to_string(victim.color)},
                                {"status", s == VictimStatus::waiting ? "waiting"
                                           : s == VictimStatus::triaged ? "triaged"
                                                                        : "expired"}});
    }
    out["window_fill"] = std::min(tracker_.window().moves(), tracker_.window().m());
    out["m"] = tracker_.window().m();
    out["terminal"] = terminal_locked();
    return out;
  }

  json act_locked(const Action& action) {
    if (tracker_.mission().over()) return error_locked("mission time exhausted");
    const std::vector<CellCode> before = tracker_.mission().cells();
    std::vector<SimEvent> events;
    try {
      events = tracker_.act(action);
    } catch (const ActionError& e) {
      return error_locked(e.what());
    }
    log_.events.insert(log_.events.end(), events.begin(), events.end());

    const Mission& m = tracker_.mission();
    json out = base_locked("update");
    out["action"] = action.kind == Action::Kind::move ? json{{"action", "move"}, {"dir", to_string(action.dir)}}
                                                      : json{{"action", "triage"}};
    out["events"] = json::array();
    for (const SimEvent& e : events) out["events"].push_back(event_to_json(e));
    json delta = json::array();
    const auto& after = m.cells();
    for (std::size_t i = 0; i < after.size(); ++i)
      if (after[i] != before[i])
        delta.push_back({{"row", static_cast<int>(i) / map_->width},
                         {"col", static_cast<int>(i) % map_->width},
                         {"code", static_cast<int>(after[i])}});
    out["delta"] = std::move(delta);
    out["agent"] = cell_json(m.agent());
    out["area_id"] = map_->areas[m.area()].id;
    out["clock"] = m.time();
    out["score"] = m.score();
    out["m"] = tracker_.window().m();
    out["window_fill"] = std::min(tracker_.window().moves(), tracker_.window().m());
    if (action.kind == Action::Kind::move) {
      if (auto p = predict_state(tracker_, *model_)) {
        json preds = json::array();
        for (const GoalCandidate& g : p->goals)
          preds.push_back({{"slot", g.slot},
                           {"kind", to_string(g.kind)},
                           {"ref_id", g.ref_id},
                           {"cell", cell_json(g.cell)},
                           {"prob", p->prediction.goal_probs[g.slot]}});
        out["predictions"] = std::move(preds);
        out["goal_probs"] = p->prediction.goal_probs;
        out["p_yellow"] = p->prediction.p_yellow;
      }
    }
    out["terminal"] = terminal_locked();
    return out;
  }

  void restart_locked() {
    tracker_ = MissionTracker(map_, model_->manifest.m, config_);
    log_.events.clear();
    persisted_ = false;
  }

  std::string id_;
  std::string map_id_;
  std::string model_id_;
  std::shared_ptr<const GridMap> map_;
  std::shared_ptr<const ModelParams> model_;
  MissionConfig config_;
  MissionTracker tracker_;
  TrajectoryLog log_;
  std::uint64_t seq_ = 0;
  bool closed_ = false;
  bool persisted_ = false;
  mutable std::mutex mu_;
};

// Registry of immutable maps and models plus the live sessions over them.
class SessionManager {
 public:
  explicit SessionManager(std::optional<std::filesystem::path> log_dir = std::nullopt, MissionConfig config = {})
      : log_dir_(std::move(log_dir)), config_(config) {}

  void add_map(const std::string& id, std::shared_ptr<const GridMap> map) {
    std::lock_guard lock(mu_);
    maps_[id] = std::move(map);
  }
  void add_model(const std::string& id, std::shared_ptr<const ModelParams> model) {
    std::lock_guard lock(mu_);
    models_[id] = std::move(model);
  }

  // Loads every *.json map and *.bin model found in the directories.
  void load_directories(const std::filesystem::path& maps_dir, const std::filesystem::path& models_dir) {
    namespace fs = std::filesystem;
    if (fs::is_directory(maps_dir))
      for (const auto& e : fs::directory_iterator(maps_dir))
        if (e.path().extension() == ".json") add_map(e.path().stem().string(), std::make_shared<const GridMap>(load_map(e.path())));
    if (fs::is_directory(models_dir))
      for (const auto& e : fs::directory_iterator(models_dir))
        if (e.path().extension() == ".bin")
          add_model(e.path().stem().string(), std::make_shared<const ModelParams>(load_model(e.path())));
  }

  json list_maps() const {
    std::lock_guard lock(mu_);
    json out = {{"v", kWireVersion}, {"maps", json::array()}};
    for (const auto& [id, m] : maps_)
      out["maps"].push_back({{"id", id},
                             {"height", m->height},
                             {"width", m->width},
                             {"areas", m->num_areas()},
                             {"victims", m->victims.size()}});
    return out;
  }

  json list_models() const {
    std::lock_guard lock(mu_);
    json out = {{"v", kWireVersion}, {"models", json::array()}};
    for (const auto& [id, m] : models_) out["models"].push_back({{"id", id}, {"manifest", manifest_to_json(m->manifest)}});
    return out;
  }

  std::shared_ptr<Session> open_session(const std::string& map_id, const std::string& model_id) {
    std::shared_ptr<const GridMap> map;
    std::shared_ptr<const ModelParams> model;
    std::string id;
    {
      std::lock_guard lock(mu_);
      auto mi = maps_.find(map_id);
      if (mi == maps_.end()) throw NotFound("unknown map '" + map_id + "'");
      auto di = models_.find(model_id);
      if (di == models_.end()) throw NotFound("unknown model '" + model_id + "'");
      map = mi->second;
      model = di->second;
      char buf[32];
      std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(++counter_));
      id = buf;
    }
    auto session = std::make_shared<Session>(id, map_id, map, model_id, model, config_);
    std::lock_guard lock(mu_);
    sessions_[id] = session;
    return session;
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  std::optional<TrajectoryLog> close_session(const std::string& id) {
    auto s = find(id);
    if (!s) return std::nullopt;
    return s->close(log_dir_);
  }

 private:
  std::optional<std::filesystem::path> log_dir_;
  MissionConfig config_;
  std::map<std::string, std::shared_ptr<const GridMap>> maps_;
  std::map<std::string, std::shared_ptr<const ModelParams>> models_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
  mutable std::mutex mu_;
};

}  // namespace usar
