#pragma once

// Ground-truth labeling of recorded trials, corpus storage, trial-level
// k-fold cross-validation and the accuracy metrics.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "usar/features.hpp"
#include "usar/neural.hpp"
#include "usar/world.hpp"

namespace usar {

// --- Labeling ---
//
// One sample per move action once the window is full. The goal label is the
// first candidate of the current area that the agent subsequently reaches:
// a victim when its triage starts, a portal when the agent leaves the area
// through it. The victim label is the color of the next completed triage
// anywhere on the map. Areas with a single candidate produce victim-only
// samples; samples with neither label are dropped.
inline std::vector<FeatureFrame> label_trajectory(const TrajectoryLog& log, std::shared_ptr<const GridMap> map, int m,
                                                  MissionConfig config = {}) {
  struct Pending {
    FeatureFrame frame;
    std::vector<GoalCandidate> goals;
    std::size_t next;  // index of the first event after the sample's action
  };
  const auto& events = log.events;
  MissionTracker tracker(map, m, config);
  std::vector<Pending> pending;
  std::size_t pos = 0;
  while (pos < events.size()) {
    const bool is_move = events[pos].kind == EventKind::move;
    pos += tracker.replay(events, pos).size();
    if (is_move && tracker.frame_ready()) pending.push_back({tracker.frame(), tracker.goals(), pos});
  }

  constexpr std::size_t none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> next_goal_event(events.size() + 1, none), next_triage(events.size() + 1, none);
  for (std::size_t i = events.size(); i-- > 0;) {
    const EventKind k = events[i].kind;
    next_goal_event[i] = k == EventKind::triage_start || k == EventKind::area_enter ? i : next_goal_event[i + 1];
    next_triage[i] = k == EventKind::triage_complete ? i : next_triage[i + 1];
  }

  std::vector<FeatureFrame> out;
  out.reserve(pending.size());
  for (Pending& p : pending) {
    FeatureFrame& f = p.frame;
    f.trial_id = log.trial_id;
    if (p.goals.size() >= 2 && next_goal_event[p.next] != none) {
      const SimEvent& e = events[next_goal_event[p.next]];
      for (const GoalCandidate& g : p.goals) {
        const bool hit = e.kind == EventKind::triage_start ? g.kind == GoalKind::victim && g.ref_id == e.victim
                                                           : g.kind == GoalKind::portal && g.ref_id == e.portal;
        if (hit) {
          f.goal_label = g.slot;
          break;
        }
      }
    }
    if (next_triage[p.next] != none) f.victim_label = events[next_triage[p.next]].color == Color::yellow ? 1 : 0;
    if (f.goal_label || f.victim_label) out.push_back(std::move(f));
  }
  return out;
}

inline void write_samples(std::ostream& out, std::span<const FeatureFrame> frames) {
  for (const FeatureFrame& f : frames) out << frame_to_json(f).dump() << '\n';
}

inline std::vector<FeatureFrame> read_samples(std::istream& in) {
  std::vector<FeatureFrame> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(frame_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error("malformed sample on line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// --- Corpus ---
//
// A directory holding manifest.json, maps/<id>.json and logs/<trial>.ndjson.

struct Trial {
  TrajectoryLog log;
  std::shared_ptr<const GridMap> map;
};

struct Corpus {
  std::map<std::string, std::shared_ptr<const GridMap>> maps;
  std::vector<Trial> trials;
  json meta = json::object();
};

inline void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "maps");
  fs::create_directories(dir / "logs");
  json manifest = {{"v", 1}, {"meta", corpus.meta}, {"maps", json::object()}, {"trials", json::array()}};
  for (const auto& [id, map] : corpus.maps) {
    const std::string rel = "maps/" + id + ".json";
    std::ofstream(dir / rel) << map_to_json(*map).dump() << '\n';
    manifest["maps"][id] = rel;
  }
  for (const Trial& t : corpus.trials) {
    const std::string rel = "logs/" + t.log.trial_id + ".ndjson";
    save_log(dir / rel, t.log);
    manifest["trials"].push_back({{"trial_id", t.log.trial_id},
                                  {"log", rel},
                                  {"map_id", t.log.map_id},
                                  {"difficulty", t.log.difficulty}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error("cannot write corpus manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("no corpus manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed corpus manifest: ") + e.what());
  }
  if (manifest.value("v", 1) != 1) throw Error("unsupported corpus version");
  Corpus corpus;
  corpus.meta = manifest.value("meta", json::object());
  for (const auto& [id, rel] : manifest.at("maps").items()) {
    GridMap map = load_map(dir / rel.get<std::string>());
    map.id = id;
    corpus.maps[id] = std::make_shared<const GridMap>(std::move(map));
  }
  for (const json& t : manifest.at("trials")) {
    Trial trial;
    trial.log = load_log(dir / t.at("log").get<std::string>());
    if (trial.log.trial_id.empty()) trial.log.trial_id = t.at("trial_id");
    if (trial.log.difficulty.empty()) trial.log.difficulty = t.value("difficulty", "");
    const std::string map_id = t.at("map_id");
    if (!corpus.maps.contains(map_id)) throw Error("trial " + trial.log.trial_id + " uses unknown map " + map_id);
    trial.map = corpus.maps[map_id];
    corpus.trials.push_back(std::move(trial));
  }
  return corpus;
}

// --- Folds ---

struct FoldSplit {
  std::vector<std::vector<std::string>> folds;
};

// Seeded shuffle followed by round-robin assignment.
inline FoldSplit make_folds(std::vector<std::string> trial_ids, int k = 6, std::uint64_t seed = 0) {
  if (k < 2) throw Error("cross-validation needs k >= 2");
  if (trial_ids.size() < static_cast<std::size_t>(k))
    throw Error("cannot split " + std::to_string(trial_ids.size()) + " trials into " + std::to_string(k) + " folds");
  Rng rng(seed);
  rng.shuffle(std::span(trial_ids));
  FoldSplit split;
  split.folds.resize(k);
  for (std::size_t i = 0; i < trial_ids.size(); ++i) split.folds[i % k].push_back(trial_ids[i]);
  return split;
}

// --- Evaluation ---

struct Accuracy {
  double goal_acc = 0.0;
  double vic_acc = 0.0;
  int goal_n = 0;
  int vic_n = 0;
};

// Goal accuracy: argmax over active slots (lowest slot on ties) equals the
// label. Victim accuracy: (p_yellow > 0.5) matches the label, counted only
// before the victim horizon.
inline Accuracy evaluate(const ModelParams& model, std::span<const FeatureFrame> samples,
                         double victim_horizon = 300.0) {
  Accuracy acc;
  int goal_hits = 0, vic_hits = 0;
  constexpr std::size_t chunk = 512;
  for (std::size_t s = 0; s < samples.size(); s += chunk) {
    const auto part = samples.subspan(s, std::min(chunk, samples.size() - s));
    const auto preds = predict(model, part);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const FeatureFrame& f = part[i];
      if (f.goal_label) {
        goal_hits += argmax_slot(preds[i].goal_probs, f.mask) == *f.goal_label;
        ++acc.goal_n;
      }
      if (f.victim_label && f.t < victim_horizon) {
        vic_hits += (preds[i].p_yellow > 0.5) == (*f.victim_label == 1);
        ++acc.vic_n;
      }
    }
  }
  acc.goal_acc = acc.goal_n ? static_cast<double>(goal_hits) / acc.goal_n : 0.0;
  acc.vic_acc = acc.vic_n ? static_cast<double>(vic_hits) / acc.vic_n : 0.0;
  return acc;
}

struct FoldResult {
  int fold = 0;
  std::vector<std::string> train_trials;
  std::vector<std::string> test_trials;
  Accuracy accuracy;
};

struct EvalReport {
  std::string difficulty;
  Variant variant = Variant::multires;
  int m = 6;
  double goal_acc = 0.0;  // mean over folds
  double vic_acc = 0.0;
  std::vector<FoldResult> folds;
};

// Throws if any fold trains on a trial it tests on, or if test folds overlap.
inline void check_fold_hygiene(const EvalReport& report) {
  std::set<std::string> seen_test;
  for (const FoldResult& f : report.folds) {
    const std::set<std::string> train(f.train_trials.begin(), f.train_trials.end());
    for (const std::string& t : f.test_trials) {
      if (train.contains(t))
        throw Error("fold " + std::to_string(f.fold) + " of " + std::string(to_string(report.variant)) +
                    " trains and tests on trial " + t);
      if (!seen_test.insert(t).second) throw Error("trial " + t + " appears in more than one test fold");
    }
  }
}

struct ExperimentConfig {
  std::vector<Variant> variants = {kAllVariants.begin(), kAllVariants.end()};
  std::vector<int> m_values = {6};
  int folds = 6;
  std::uint64_t fold_seed = 0;
  TrainConfig train;
  unsigned threads = 0;  // 0 = hardware concurrency
  std::optional<std::filesystem::path> model_dir;
};

inline Manifest manifest_for(Variant v, int m, int n_areas) {
  Manifest mf;
  mf.variant = v;
  mf.m = m;
  mf.n_areas = n_areas;
  return mf;
}

namespace detail {

template <typename Job>
void run_parallel(std::vector<Job>& jobs, unsigned threads) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || error) return;
        i = next++;
      }
      try {
        jobs[i]();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (threads <= 1 || jobs.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(threads, jobs.size()); ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// Trains and cross-validates every (difficulty, variant, m) combination.
// Folds are drawn once per difficulty and shared by all variants and m.
inline std::vector<EvalReport> run_experiment(const Corpus& corpus, const ExperimentConfig& cfg) {
  std::vector<EvalReport> reports;
  if (cfg.variants.empty() || cfg.m_values.empty()) return reports;

  std::map<std::string, std::vector<const Trial*>> by_difficulty;
  for (const Trial& t : corpus.trials) by_difficulty[t.log.difficulty].push_back(&t);

  // trial id -> samples, per m
  std::map<int, std::map<std::string, std::vector<FeatureFrame>>> samples;
  for (int m : cfg.m_values)
    for (const Trial& t : corpus.trials) samples[m][t.log.trial_id] = label_trajectory(t.log, t.map, m);

  struct Cell {
    std::string difficulty;
    Variant variant;
    int m;
    int n_areas;
    FoldSplit split;
  };
  std::vector<Cell> cells;
  for (const auto& [difficulty, trials] : by_difficulty) {
    std::vector<std::string> ids;
    for (const Trial* t : trials) ids.push_back(t->log.trial_id);
    const FoldSplit split = make_folds(ids, cfg.folds, cfg.fold_seed);
    const int n_areas = trials.front()->map->num_areas();
    for (const Trial* t : trials)
      if (t->map->num_areas() != n_areas) throw Error("difficulty '" + difficulty + "' mixes maps with different area counts");
    for (Variant v : cfg.variants)
      for (int m : cfg.m_values) cells.push_back({difficulty, v, m, n_areas, split});
  }

  reports.resize(cells.size());
  std::vector<std::function<void()>> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    reports[c].difficulty = cells[c].difficulty;
    reports[c].variant = cells[c].variant;
    reports[c].m = cells[c].m;
    reports[c].folds.resize(cells[c].split.folds.size());
    for (std::size_t k = 0; k < cells[c].split.folds.size(); ++k) {
      jobs.push_back([&, c, k] {
        const Cell& cell = cells[c];
        const auto& trial_samples = samples.at(cell.m);
        FoldResult& fr = reports[c].folds[k];
        fr.fold = static_cast<int>(k);
        fr.test_trials = cell.split.folds[k];
        std::vector<FeatureFrame> train_set, test_set;
        for (std::size_t j = 0; j < cell.split.folds.size(); ++j)
          for (const std::string& id : cell.split.folds[j]) {
            const auto& s = trial_samples.at(id);
            if (j == k) {
              test_set.insert(test_set.end(), s.begin(), s.end());
            } else {
              fr.train_trials.push_back(id);
              train_set.insert(train_set.end(), s.begin(), s.end());
            }
          }
        const Manifest mf = manifest_for(cell.variant, cell.m, cell.n_areas);
        TrainResult trained = train(train_set, mf, cfg.train);
        fr.accuracy = evaluate(trained.params, test_set, cfg.train.victim_horizon);
        if (cfg.model_dir) {
          std::filesystem::create_directories(*cfg.model_dir);
          save_model(*cfg.model_dir / (cell.difficulty + "_" + std::string(to_string(cell.variant)) + "_m" +
                                       std::to_string(cell.m) + "_fold" + std::to_string(k) + ".bin"),
                     trained.params);
        }
      });
    }
  }
  detail::run_parallel(jobs, cfg.threads);

  for (EvalReport& r : reports) {
    check_fold_hygiene(r);
    double g = 0.0, v = 0.0;
    for (const FoldResult& f : r.folds) {
      g += f.accuracy.goal_acc;
      v += f.accuracy.vic_acc;
    }
    r.goal_acc = g / r.folds.size();
    r.vic_acc = v / r.folds.size();
  }
  return reports;
}

inline void write_report_csv(std::ostream& out, std::span<const EvalReport> reports) {
  out << "difficulty,variant,m,goal_acc,vic_acc,goal_n,vic_n,folds\n";
  char buf[256];
  for (const EvalReport& r : reports) {
    int gn = 0, vn = 0;
    for (const auto& f : r.folds) {
      gn += f.accuracy.goal_n;
      vn += f.accuracy.vic_n;
    }
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%.4f,%.4f,%d,%d,%zu\n", r.difficulty.c_str(),
                  std::string(to_string(r.variant)).c_str(), r.m, r.goal_acc, r.vic_acc, gn, vn, r.folds.size());
    out << buf;
  }
}

inline void write_fold_csv(std::ostream& out, std::span<const EvalReport> reports) {
  out << "difficulty,variant,m,fold,goal_acc,vic_acc,goal_n,vic_n,test_trials\n";
  char buf[256];
  for (const EvalReport& r : reports)
    for (const FoldResult& f : r.folds) {
      std::string tests;
      for (const auto& t : f.test_trials) tests += (tests.empty() ? "" : " ") + t;
      std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%.4f,%.4f,%d,%d,", r.difficulty.c_str(),
                    std::string(to_string(r.variant)).c_str(), r.m, f.fold, f.accuracy.goal_acc, f.accuracy.vic_acc,
                    f.accuracy.goal_n, f.accuracy.vic_n);
      out << buf << tests << '\n';
    }
}

// Rows are variants (or window lengths), columns are difficulty levels.
inline void print_report_table(std::ostream& out, std::span<const EvalReport> reports) {
  std::vector<std::string> difficulties;
  std::vector<std::pair<Variant, int>> rows;
  for (const EvalReport& r : reports) {
    if (std::find(difficulties.begin(), difficulties.end(), r.difficulty) == difficulties.end())
      difficulties.push_back(r.difficulty);
    if (std::find(rows.begin(), rows.end(), std::pair{r.variant, r.m}) == rows.end()) rows.push_back({r.variant, r.m});
  }
  out << std::left << std::setw(28) << "model";
  for (const auto& d : difficulties) out << std::setw(22) << (d.empty() ? "-" : d);
  out << '\n' << std::setw(28) << "";
  for (std::size_t i = 0; i < difficulties.size(); ++i) out << std::setw(11) << "goal acc" << std::setw(11) << "vic acc";
  out << '\n';
  for (const auto& [variant, m] : rows) {
    out << std::setw(28) << (std::string(to_string(variant)) + " m=" + std::to_string(m));
    for (const auto& d : difficulties) {
      for (const EvalReport& r : reports)
        if (r.difficulty == d && r.variant == variant && r.m == m) {
          out << std::fixed << std::setprecision(4) << std::setw(11) << r.goal_acc << std::setw(11) << r.vic_acc;
          out.unsetf(std::ios::fixed);
        }
    }
    out << '\n';
  }
}

}  // namespace usar
