#include <gtest/gtest.h>

#include <sstream>

#include "gradcheck.hpp"
#include "support.hpp"

using namespace usar;

namespace {

Manifest small_manifest(Variant v = Variant::multires, int n_areas = 3, std::uint64_t seed = 0) {
  Manifest mf;
  mf.variant = v;
  mf.n_areas = n_areas;
  mf.seed = seed;
  return mf;
}

// A cache with hand-set logits; enough for loss().
ForwardCache logits_cache(std::vector<std::vector<double>> goal, std::vector<std::vector<std::uint8_t>> mask,
                          std::vector<double> victim) {
  ForwardCache c;
  c.n = static_cast<int>(goal.size());
  for (std::size_t i = 0; i < goal.size(); ++i) {
    goal[i].resize(kMaxGoals, 0.0);
    mask[i].resize(kMaxGoals, 0);
    c.goal_logits.insert(c.goal_logits.end(), goal[i].begin(), goal[i].end());
    c.mask.insert(c.mask.end(), mask[i].begin(), mask[i].end());
  }
  c.victim_logit = std::move(victim);
  return c;
}

double sum_sq(ModelParams& p) {
  double s = 0.0;
  for (auto& t : trainable(p))
    for (double v : *t.data) s += 0.5 * v * v;
  return s;
}

std::vector<FeatureFrame> synthetic_corpus(int n, std::uint64_t seed) {
  const auto map = usar::test::bundled("easy");
  std::vector<FeatureFrame> out;
  for (std::uint64_t s = seed; out.size() < static_cast<std::size_t>(n); ++s) {
    const auto log = run_trial(map, {PolicyKind::yellow_first, 0.1, s}, "t");
    for (auto& f : label_trajectory(log, map, 6))
      if (out.size() < static_cast<std::size_t>(n)) out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

TEST(Manifest, DefaultWidthsAndParameterLayout) {
  const ModelParams p = init_model(small_manifest(Variant::multires, 18));
  ASSERT_EQ(p.hr.size(), 1u);
  EXPECT_EQ(p.hr[0].in, kMaxGoals);
  EXPECT_EQ(p.hr[0].out, 4);
  EXPECT_EQ(p.lr[0].in, 18 * 6);
  EXPECT_EQ(p.lr[0].out, 64);
  EXPECT_EQ(p.trunk[0].in, 68);
  EXPECT_EQ(p.trunk[0].out, 64);
  EXPECT_EQ(p.goal.out, kMaxGoals);
  EXPECT_EQ(p.victim.out, 1);
  // (W + b + gamma + beta) per block, (W + b) per head.
  const std::size_t expect = (16 * 4 + 3 * 4) + (108 * 64 + 3 * 64) + (68 * 64 + 3 * 64) + (64 * 16 + 16) + (64 + 1);
  EXPECT_EQ(parameter_count(p), expect);

  EXPECT_EQ(init_model(small_manifest(Variant::baseline_locations)).hr[0].in, 12);
  EXPECT_EQ(init_model(small_manifest(Variant::baseline_dmd_area)).hr[0].in, kMaxGoals + 1);
  EXPECT_TRUE(init_model(small_manifest(Variant::baseline_dmd_area)).lr.empty());
}

TEST(Manifest, JsonRoundTrip) {
  Manifest mf = small_manifest(Variant::baseline_locations, 7, 42);
  mf.m = 12;
  EXPECT_EQ(manifest_from_json(manifest_to_json(mf)), mf);
}

TEST(MaskedSoftmax, EqualLogitsAreUniform) {
  std::array<double, kMaxGoals> logits{}, out{};
  std::array<std::uint8_t, kMaxGoals> mask{};
  for (int k = 0; k < 4; ++k) mask[k] = 1;
  logits.fill(2.5);
  masked_softmax(logits, mask, out);
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(out[k], 0.25);
  for (int k = 4; k < kMaxGoals; ++k) EXPECT_EQ(out[k], 0.0);
}

TEST(MaskedSoftmax, NormalizedPaddedZeroAndShiftInvariant) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    std::array<double, kMaxGoals> logits{}, out{}, shifted_out{}, shifted{};
    std::array<std::uint8_t, kMaxGoals> mask{};
    const int active = 1 + static_cast<int>(rng.below(kMaxGoals));
    for (int k = 0; k < kMaxGoals; ++k) {
      mask[k] = k < active;
      logits[k] = rng.uniform(-30.0, 30.0);
    }
    rng.shuffle(std::span<std::uint8_t>(mask));
    masked_softmax(logits, mask, out);
    const double c = rng.uniform(-100.0, 100.0);
    for (int k = 0; k < kMaxGoals; ++k) shifted[k] = logits[k] + (mask[k] ? c : 0.0);
    masked_softmax(shifted, mask, shifted_out);
    double sum = 0.0;
    for (int k = 0; k < kMaxGoals; ++k) {
      if (mask[k]) {
        sum += out[k];
      } else {
        ASSERT_EQ(out[k], 0.0);
      }
      ASSERT_LE(std::abs(out[k] - shifted_out[k]), 1e-12);
    }
    ASSERT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Sigmoid, ZeroIsHalfAndStable) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}

TEST(Forward, PaddedProbabilitiesAreExactlyZero) {
  const ModelParams p = init_model(small_manifest());
  Rng rng(3);
  const auto rb = usar::test::random_batch(rng, p.manifest, 16);
  const Batch b = assemble(p.manifest, rb.frames);
  for (Mode mode : {Mode::train, Mode::infer}) {
    const ForwardCache c = forward(p, b, mode);
    for (int i = 0; i < c.n; ++i) {
      double s = 0.0;
      for (int k = 0; k < kMaxGoals; ++k) {
        const double v = c.goal_probs[i * kMaxGoals + k];
        if (!rb.frames[i].mask[k]) { EXPECT_EQ(v, 0.0); }
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Forward, BatchPreconditions) {
  const ModelParams p = init_model(small_manifest());
  Rng rng(3);
  const auto rb = usar::test::random_batch(rng, p.manifest, 1);
  const Batch b = assemble(p.manifest, rb.frames);
  EXPECT_THROW(forward(p, b, Mode::train), ModelError);
  EXPECT_NO_THROW(forward(p, b, Mode::infer));
  EXPECT_THROW(forward(p, Batch{}, Mode::infer), ModelError);
}

TEST(Loss, WeightedSum) {
  // goal CE = ln(1 + e^x) = 1 and victim BCE = softplus(z) = 2 with label 0.
  const double x = std::log(std::exp(1.0) - 1.0), z = std::log(std::exp(2.0) - 1.0);
  const auto c = logits_cache({{0.0, x}}, {{1, 1}}, {z});
  const LossValue L = loss(c, Labels{{0}, {0}}, 0.3);
  EXPECT_NEAR(L.goal, 1.0, 1e-12);
  EXPECT_NEAR(L.victim, 2.0, 1e-12);
  EXPECT_NEAR(L.total, 1.6, 1e-12);
}

TEST(Loss, PerfectAndUniformGoalPredictions) {
  const auto perfect = logits_cache({{1000.0, 0.0, 0.0}}, {{1, 1, 1}}, {0.0});
  EXPECT_EQ(loss(perfect, Labels{{0}, {-1}}).goal, 0.0);
  const auto uniform = logits_cache({{0.3, 0.3, 0.3, 0.3}}, {{1, 1, 1, 1}}, {0.0});
  EXPECT_NEAR(loss(uniform, Labels{{2}, {-1}}).goal, std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
  EXPECT_THROW(loss(uniform, Labels{{5}, {-1}}), ModelError);
}

TEST(Backward, MatchesFiniteDifferencesAcrossVariants) {
  for (Variant v : kAllVariants) {
    Rng rng(10 + static_cast<int>(v));
    ModelParams p = init_model(small_manifest(v, 3, 5));
    usar::test::jitter(p, rng);
    const auto rb = usar::test::random_batch(rng, p.manifest, 16);
    const auto r = usar::test::gradient_check(p, assemble(p.manifest, rb.frames), rb.labels);
    EXPECT_LT(r.max_rel_error, 1e-5) << to_string(v) << " worst " << r.worst_tensor;
    EXPECT_LT(r.kinks * 100, r.checked + r.kinks) << to_string(v);
  }
}

TEST(Backward, ZeroVictimWeightGivesNoVictimHeadGradient) {
  Rng rng(4);
  ModelParams p = init_model(small_manifest());
  usar::test::jitter(p, rng);
  auto rb = usar::test::random_batch(rng, p.manifest, 16);
  const ForwardCache c = forward(p, assemble(p.manifest, rb.frames), Mode::train);
  const ModelParams g = backward(p, c, rb.labels, 0.0);
  for (double v : g.victim.W) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.victim.b[0], 0.0);
}

TEST(Backward, DuplicatedSamplesContributeEqually) {
  Rng rng(6);
  ModelParams p = init_model(small_manifest());
  usar::test::jitter(p, rng);
  auto rb = usar::test::random_batch(rng, p.manifest, 16);
  rb.frames[7] = rb.frames[3];
  const ForwardCache c = forward(p, assemble(p.manifest, rb.frames), Mode::train);
  Labels only3{std::vector<int>(16, -1), std::vector<int>(16, -1)}, only7 = only3;
  only3.goal[3] = only7.goal[7] = 1;
  only3.victim[3] = only7.victim[7] = 1;
  ModelParams g3 = backward(p, c, only3), g7 = backward(p, c, only7);
  auto t3 = trainable(g3), t7 = trainable(g7);
  for (std::size_t t = 0; t < t3.size(); ++t)
    for (std::size_t i = 0; i < t3[t].data->size(); ++i)
      ASSERT_NEAR((*t3[t].data)[i], (*t7[t].data)[i], 1e-12) << t3[t].name;
}

TEST(Backward, PaddedGoalSlotsReceiveNoGradient) {
  Rng rng(8);
  ModelParams p = init_model(small_manifest());
  usar::test::jitter(p, rng);
  auto rb = usar::test::random_batch(rng, p.manifest, 16);
  for (auto& f : rb.frames)
    for (int k = 6; k < kMaxGoals; ++k) {
      f.mask[k] = 0;
      f.dmd[k] = 0.0;
    }
  for (auto& g : rb.labels.goal)
    if (g >= 6) g = 0;
  const ForwardCache c = forward(p, assemble(p.manifest, rb.frames), Mode::train);
  const ModelParams g = backward(p, c, rb.labels);
  for (int k = 6; k < kMaxGoals; ++k) {
    EXPECT_EQ(g.goal.b[k], 0.0);
    for (int j = 0; j < g.goal.in; ++j) EXPECT_EQ(g.goal.W[k * g.goal.in + j], 0.0);
  }
}

TEST(Backward, RejectsInferAndStaleCaches) {
  Rng rng(9);
  ModelParams p = init_model(small_manifest());
  const auto rb = usar::test::random_batch(rng, p.manifest, 4);
  const Batch b = assemble(p.manifest, rb.frames);
  EXPECT_THROW(backward(p, forward(p, b, Mode::infer), rb.labels), ModelError);
  const ForwardCache c = forward(p, b, Mode::train);
  ModelParams g = backward(p, c, rb.labels);
  AdamState s;
  adam_step(p, g, s);
  EXPECT_THROW(backward(p, c, rb.labels), ModelError);
}

TEST(BatchNorm, InferApproachesTrainOnAFixedBatch) {
  Rng rng(12);
  ModelParams p = init_model(small_manifest());
  usar::test::jitter(p, rng);
  const auto rb = usar::test::random_batch(rng, p.manifest, 16);
  const Batch b = assemble(p.manifest, rb.frames);
  for (int i = 0; i < 400; ++i) update_running_stats(p, forward(p, b, Mode::train));
  const ForwardCache tr = forward(p, b, Mode::train), inf = forward(p, b, Mode::infer);
  for (std::size_t k = 0; k < tr.goal_probs.size(); ++k) EXPECT_NEAR(tr.goal_probs[k], inf.goal_probs[k], 1e-3);
  for (int i = 0; i < tr.n; ++i) EXPECT_NEAR(tr.p_yellow[i], inf.p_yellow[i], 1e-3);
  for (const auto* blocks : {&p.hr, &p.lr, &p.trunk})
    for (const DenseBN& blk : *blocks)
      for (double v : blk.run_var) {
        EXPECT_GE(v, 0.0);
        EXPECT_TRUE(std::isfinite(v));
      }
}

TEST(Adam, FirstStepMovesByTheLearningRate) {
  ModelParams p = init_model(small_manifest());
  const ModelParams before = p;
  ModelParams g = zeros_like(p);
  for (auto& t : trainable(g)) std::fill(t.data->begin(), t.data->end(), 0.37);
  AdamState s;
  adam_step(p, g, s);
  EXPECT_EQ(s.step, 1u);
  auto a = trainable(p), b = trainable(const_cast<ModelParams&>(before));
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].data->size(); ++i)
      ASSERT_NEAR((*b[t].data)[i] - (*a[t].data)[i], 0.001, 1e-9);
  for (const auto& m2 : s.m2)
    for (double v : m2) EXPECT_GE(v, 0.0);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ModelParams p = init_model(small_manifest());
  const ModelParams before = p;
  ModelParams g = zeros_like(p);
  AdamState s;
  for (int i = 0; i < 5; ++i) adam_step(p, g, s);
  EXPECT_TRUE(p == before);
}

TEST(Adam, QuadraticBowlDecreases) {
  ModelParams p = init_model(small_manifest());
  AdamState s;
  s.lr = 0.01;
  double prev = sum_sq(p);
  for (int i = 0; i < 10; ++i) {
    ModelParams g = p;  // gradient of 0.5 * |w|^2 is w
    adam_step(p, g, s);
    const double now = sum_sq(p);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Adam, RejectsNonFiniteGradients) {
  ModelParams p = init_model(small_manifest());
  ModelParams g = zeros_like(p);
  g.goal.W[3] = std::numeric_limits<double>::quiet_NaN();
  AdamState s;
  EXPECT_THROW(adam_step(p, g, s), ModelError);
}

TEST(Train, SmokeRunReducesLoss) {
  const auto corpus = synthetic_corpus(200, 1);
  TrainConfig cfg;
  cfg.epochs = 50;
  const auto r = train(corpus, small_manifest(Variant::multires, corpus[0].num_areas()), cfg);
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_LT(r.history.back().total, r.history.front().total);
}

TEST(Train, ZeroLearningRateKeepsInitialWeights) {
  const auto corpus = synthetic_corpus(64, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 0.0;
  cfg.seed = 3;
  const Manifest mf = small_manifest(Variant::multires, corpus[0].num_areas(), 3);
  auto r = train(corpus, mf, cfg);
  ModelParams init = init_model(mf);
  auto a = trainable(r.params), b = trainable(init);
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(*a[t].data, *b[t].data) << a[t].name;
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  const auto corpus = synthetic_corpus(300, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  const Manifest mf = small_manifest(Variant::multires, corpus[0].num_areas());
  const auto a = train(corpus, mf, cfg), b = train(corpus, mf, cfg);
  std::stringstream ha, hb, ma, mb;
  write_history_csv(ha, a.history);
  write_history_csv(hb, b.history);
  EXPECT_EQ(ha.str(), hb.str());
  write_model(ma, a.params);
  write_model(mb, b.params);
  EXPECT_EQ(ma.str(), mb.str());
}

TEST(ModelFile, SaveLoadIsExact) {
  const auto corpus = synthetic_corpus(100, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto r = train(corpus, small_manifest(Variant::multires, corpus[0].num_areas()), cfg);
  std::stringstream ss;
  write_model(ss, r.params);
  const ModelParams back = read_model(ss);
  EXPECT_TRUE(back == r.params);
  const auto pa = predict(r.params, corpus), pb = predict(back, corpus);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].goal_probs, pb[i].goal_probs);
    ASSERT_EQ(pa[i].p_yellow, pb[i].p_yellow);
  }
}

TEST(ModelFile, TruncatedAndForeignFilesAreRejected) {
  std::stringstream ss;
  write_model(ss, init_model(small_manifest()));
  const std::string bytes = ss.str();
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream t(bytes.substr(0, cut));
    EXPECT_THROW(read_model(t), ModelError) << cut;
  }
  std::stringstream junk("definitely not a model");
  EXPECT_THROW(read_model(junk), ModelError);
}

TEST(ModelFile, WindowLengthMismatchIsRejected) {
  const ModelParams p = init_model(small_manifest());
  Rng rng(1);
  Manifest m3 = p.manifest;
  m3.m = 3;
  const auto rb = usar::test::random_batch(rng, m3, 2);
  EXPECT_THROW(predict(p, rb.frames), ModelError);
}
