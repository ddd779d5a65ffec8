#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace usar;

namespace {

TrajectoryLog scripted(std::shared_ptr<const GridMap> map, std::initializer_list<std::optional<Direction>> script) {
  TrajectoryLog log;
  log.trial_id = "scripted";
  log.map_id = map->id;
  Mission m(map);
  for (const auto& a : script) {
    auto ev = m.apply(a ? Action::move_to(*a) : Action::do_triage());
    log.events.insert(log.events.end(), ev.begin(), ev.end());
  }
  return log;
}

constexpr auto U = Direction::up, D = Direction::down, L = Direction::left, R = Direction::right;
constexpr std::optional<Direction> T = std::nullopt;

// A model whose goal head always ranks slot `slot` first and whose victim
// head saturates toward `yellow`.
ModelParams constant_model(int n_areas, int slot, bool yellow) {
  Manifest mf;
  mf.n_areas = n_areas;
  ModelParams p = init_model(mf);
  std::fill(p.goal.W.begin(), p.goal.W.end(), 0.0);
  std::fill(p.goal.b.begin(), p.goal.b.end(), 0.0);
  if (slot >= 0) p.goal.b[slot] = 5.0;
  std::fill(p.victim.W.begin(), p.victim.W.end(), 0.0);
  p.victim.b[0] = yellow ? 10.0 : -10.0;
  return p;
}

FeatureFrame labeled_frame(int n_areas, int active, std::optional<int> goal, std::optional<int> victim, double t) {
  FeatureFrame f;
  for (int k = 0; k < active; ++k) f.mask[k] = 1;
  f.lowres.assign(static_cast<std::size_t>(kLowResPerArea) * n_areas, 0.0);
  f.lowres[2] = 1.0;
  f.locations.assign(12, 0.5);
  f.goal_label = goal;
  f.victim_label = victim;
  f.t = t;
  return f;
}

Corpus small_corpus(int trials, std::uint64_t seed) {
  CorpusSpec spec;
  spec.trials = trials;
  spec.seed = seed;
  return generate_corpus({usar::test::bundled("easy")}, spec);
}

}  // namespace

TEST(Label, VictimTargetBeforeTriage) {
  const auto map = usar::test::three_room();
  // West candidates: portal 1 (slot 0), victim 5 at (2,2) (slot 1).
  const auto log = scripted(map, {R, L, U, T, D, R, R, R, U, U, R, T});
  const auto frames = label_trajectory(log, map, 3);
  ASSERT_EQ(frames.size(), 8u);

  // Third move ends on victim 5, which is triaged next.
  EXPECT_EQ(frames[0].area_id, 1);
  EXPECT_EQ(frames[0].goal_label, 1);
  EXPECT_EQ(frames[0].victim_label, 0);

  // With victim 5 rescued West has one candidate, so only victim labels
  // remain until the agent is in Middle (portals 1, 2, victims 1, 2).
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_FALSE(frames[i].goal_label) << i;
    EXPECT_EQ(frames[i].victim_label, 1) << i;
  }
  for (std::size_t i = 4; i < 8; ++i) {
    EXPECT_EQ(frames[i].area_id, 2) << i;
    EXPECT_EQ(frames[i].goal_label, 2) << i;  // victim 1 is triaged next
    EXPECT_EQ(frames[i].victim_label, 1) << i;
  }
}

TEST(Label, ExitPortalAfterLeaving) {
  const auto map = usar::test::three_room();
  const auto log = scripted(map, {L, R, R, R, R});
  const auto frames = label_trajectory(log, map, 3);
  // Samples at (3,3) and (3,4) in West; the sample in Middle has no later
  // goal event or triage and is dropped.
  ASSERT_EQ(frames.size(), 2u);
  for (const auto& f : frames) {
    EXPECT_EQ(f.area_id, 1);
    EXPECT_EQ(f.goal_label, 0);
    EXPECT_FALSE(f.victim_label);
  }
}

TEST(Label, NoTriagesMeansNoVictimLabels) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto map = usar::test::shared(usar::test::random_map(rng));
    TrajectoryLog log;
    Mission m(map);
    for (int a = 0; a < 1500 && !m.over(); ++a) {
      auto ev = m.apply(usar::test::random_action(m, rng, 0.0));
      log.events.insert(log.events.end(), ev.begin(), ev.end());
    }
    for (const auto& f : label_trajectory(log, map, 6)) EXPECT_FALSE(f.victim_label);
  }
}

TEST(Label, SingleCandidateAreasHaveNoGoalLabel) {
  const auto map = usar::test::shared(load_map_string(
      R"({"height":3,"width":8,"victims":[{"id":1,"row":1,"col":6,"color":"yellow"}],"spawn":[1,0]})"));
  const auto log = scripted(map, {R, R, R, R, R, R, T});
  const auto frames = label_trajectory(log, map, 3);
  ASSERT_EQ(frames.size(), 4u);
  for (const auto& f : frames) {
    EXPECT_FALSE(f.goal_label);
    EXPECT_EQ(f.victim_label, 1);
  }
}

TEST(Label, LabelsPointAtActiveSlotsAndAreDeterministic) {
  const auto corpus = small_corpus(6, 9);
  for (const Trial& t : corpus.trials) {
    const auto a = label_trajectory(t.log, t.map, 6), b = label_trajectory(t.log, t.map, 6);
    EXPECT_EQ(a, b);
    for (const auto& f : a) {
      int active = 0;
      for (int k = 0; k < kMaxGoals; ++k) {
        active += f.mask[k];
        if (!f.mask[k]) { EXPECT_EQ(f.dmd[k], 0.0); }
      }
      if (f.goal_label) {
        EXPECT_GE(active, 2);
        EXPECT_EQ(f.mask[*f.goal_label], 1);
      }
      EXPECT_TRUE(f.goal_label || f.victim_label);
      EXPECT_EQ(f.trial_id, t.log.trial_id);
    }
  }
}

TEST(Samples, NdjsonRoundTrip) {
  const auto corpus = small_corpus(6, 2);
  const auto frames = label_trajectory(corpus.trials[0].log, corpus.trials[0].map, 6);
  std::stringstream ss;
  write_samples(ss, frames);
  EXPECT_EQ(read_samples(ss), frames);
  std::stringstream bad("{\"dmd\": oops}\n");
  EXPECT_THROW(read_samples(bad), Error);
}

TEST(Corpus, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "usar_corpus_roundtrip";
  std::filesystem::remove_all(dir);
  const Corpus c = small_corpus(6, 4);
  save_corpus(dir, c);
  const Corpus back = load_corpus(dir);
  ASSERT_EQ(back.trials.size(), c.trials.size());
  for (std::size_t i = 0; i < c.trials.size(); ++i) {
    EXPECT_EQ(back.trials[i].log.trial_id, c.trials[i].log.trial_id);
    EXPECT_EQ(back.trials[i].log.events, c.trials[i].log.events);
    EXPECT_EQ(back.trials[i].log.difficulty, c.trials[i].log.difficulty);
    EXPECT_EQ(map_to_json(*back.trials[i].map), map_to_json(*c.trials[i].map));
  }
  EXPECT_EQ(back.meta, c.meta);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_corpus(dir), Error);
}

TEST(Folds, SixtySixTrialsGiveElevenPerFold) {
  std::vector<std::string> ids;
  for (int i = 0; i < 66; ++i) ids.push_back("t" + std::to_string(i));
  const FoldSplit s = make_folds(ids, 6, 1);
  ASSERT_EQ(s.folds.size(), 6u);
  std::set<std::string> all;
  for (const auto& f : s.folds) {
    EXPECT_EQ(f.size(), 11u);
    all.insert(f.begin(), f.end());
  }
  EXPECT_EQ(all.size(), 66u);
}

TEST(Folds, UnevenSplitAndSeeding) {
  const std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f", "g"};
  const FoldSplit s = make_folds(ids, 6, 3);
  std::vector<std::size_t> sizes;
  for (const auto& f : s.folds) sizes.push_back(f.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 1, 1, 1, 1, 1}));
  EXPECT_EQ(make_folds(ids, 6, 3).folds, s.folds);

  std::vector<std::string> many;
  for (int i = 0; i < 66; ++i) many.push_back("t" + std::to_string(i));
  EXPECT_NE(make_folds(many, 6, 1).folds, make_folds(many, 6, 2).folds);
  EXPECT_THROW(make_folds({"a", "b"}, 6), Error);
  EXPECT_THROW(make_folds(many, 1), Error);
}

TEST(Evaluate, OraclePredictionsScorePerfectly) {
  const ModelParams p = constant_model(2, 1, true);
  std::vector<FeatureFrame> frames;
  for (int i = 0; i < 40; ++i) frames.push_back(labeled_frame(2, 2 + i % 5, 1, 1, static_cast<double>(10 * i % 290)));
  const Accuracy a = evaluate(p, frames);
  EXPECT_EQ(a.goal_acc, 1.0);
  EXPECT_EQ(a.vic_acc, 1.0);
  EXPECT_EQ(a.goal_n, 40);
  EXPECT_EQ(a.vic_n, 40);
  EXPECT_EQ(evaluate(constant_model(2, 0, false), frames).goal_acc, 0.0);
  EXPECT_EQ(evaluate(constant_model(2, 0, false), frames).vic_acc, 0.0);
}

TEST(Evaluate, ConstantPredictorOnUniformLabelsIsChance) {
  const ModelParams p = constant_model(2, -1, true);  // uniform goal probabilities, ties go to slot 0
  Rng rng(7);
  std::vector<FeatureFrame> frames;
  for (int i = 0; i < 20000; ++i) frames.push_back(labeled_frame(2, 4, static_cast<int>(rng.below(4)), std::nullopt, 1.0));
  const Accuracy a = evaluate(p, frames);
  EXPECT_NEAR(a.goal_acc, 0.25, 0.015);
  EXPECT_EQ(a.vic_n, 0);
}

TEST(Evaluate, VictimAccuracyExcludesLateSamples) {
  const ModelParams p = constant_model(2, 0, true);
  std::vector<FeatureFrame> frames = {labeled_frame(2, 2, std::nullopt, 1, 100.0),
                                      labeled_frame(2, 2, std::nullopt, 0, 310.0),
                                      labeled_frame(2, 2, std::nullopt, 0, 300.0)};
  const Accuracy a = evaluate(p, frames);
  EXPECT_EQ(a.vic_n, 1);
  EXPECT_EQ(a.vic_acc, 1.0);
  EXPECT_EQ(a.goal_n, 0);
}

TEST(Experiment, EmptyVariantListGivesEmptyReport) {
  ExperimentConfig cfg;
  cfg.variants.clear();
  EXPECT_TRUE(run_experiment(small_corpus(6, 1), cfg).empty());
}

TEST(Experiment, SmokeRunIsHygienicAndAveragesFolds) {
  ExperimentConfig cfg;
  cfg.train.epochs = 2;
  cfg.m_values = {3, 6};
  const auto reports = run_experiment(small_corpus(12, 1), cfg);
  ASSERT_EQ(reports.size(), 6u);
  for (const EvalReport& r : reports) {
    ASSERT_EQ(r.folds.size(), 6u);
    EXPECT_NO_THROW(check_fold_hygiene(r));
    double g = 0.0;
    std::set<std::string> tested;
    for (const auto& f : r.folds) {
      g += f.accuracy.goal_acc;
      tested.insert(f.test_trials.begin(), f.test_trials.end());
      EXPECT_EQ(f.train_trials.size() + f.test_trials.size(), 12u);
    }
    EXPECT_EQ(tested.size(), 12u);
    EXPECT_NEAR(r.goal_acc, g / 6.0, 1e-15);
    EXPECT_GE(r.vic_acc, 0.0);
    EXPECT_LE(r.vic_acc, 1.0);
  }
  // All variants of a difficulty share one split.
  for (const EvalReport& r : reports)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(r.folds[k].test_trials, reports[0].folds[k].test_trials);
  std::stringstream csv;
  write_report_csv(csv, reports);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "difficulty,variant,m,goal_acc,vic_acc,goal_n,vic_n,folds");
}

TEST(Experiment, HygieneCheckCatchesLeaks) {
  EvalReport r;
  r.folds = {{0, {"a", "b"}, {"c"}, {}}, {1, {"a", "c"}, {"b"}, {}}};
  EXPECT_NO_THROW(check_fold_hygiene(r));
  r.folds[1].train_trials.push_back("b");
  EXPECT_THROW(check_fold_hygiene(r), Error);
  r.folds[1] = {1, {"a"}, {"c"}, {}};
  EXPECT_THROW(check_fold_hygiene(r), Error);
}
