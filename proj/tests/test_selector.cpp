#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cdsm/datagen.hpp"
#include "cdsm/error.hpp"
#include "cdsm/random.hpp"
#include "cdsm/selector.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cdsm;
using cdsm::testing::TempDir;
using cdsm::testing::read_text;

namespace {

Tensor vec(std::initializer_list<double> v) {
  Tensor t(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) t(0, i++) = x;
  return t;
}

std::vector<const Tensor*> ptrs(const std::vector<Tensor>& v) {
  std::vector<const Tensor*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

Tensor random_vec(Rng& rng, Eigen::Index d) {
  Tensor t(1, d);
  for (Eigen::Index j = 0; j < d; ++j) t(0, j) = normal(rng);
  return t;
}

SelectorConfig cfg(RankingMode mode, std::size_t vocab = 20, std::size_t dim = 6) {
  SelectorConfig c;
  c.encoder.vocab_size = vocab;
  c.encoder.dim = dim;
  c.mode = mode;
  return c;
}

std::set<std::size_t> as_set(const SelectionResult& r) { return {r.selected.begin(), r.selected.end()}; }

}  // namespace

TEST(SelectorModel, PhiPresentIffMultiStep) {
  SelectorModel one(cfg(RankingMode::OneStep), 1), multi(cfg(RankingMode::MultiStep), 1);
  EXPECT_FALSE(one.has_phi());
  EXPECT_THROW(one.phi_weight(), ConfigError);
  ASSERT_TRUE(multi.has_phi());
  EXPECT_EQ(multi.phi_weight().value.rows(), 12);
  EXPECT_EQ(multi.phi_weight().value.cols(), 6);
}

TEST(SelectorModel, SaveLoadRoundTrip) {
  TempDir dir;
  SelectorModel m(cfg(RankingMode::MultiStep), 4);
  m.save(dir / "s.ckpt");
  auto back = SelectorModel::load(dir / "s.ckpt");
  EXPECT_EQ(back.mode(), RankingMode::MultiStep);
  std::vector<TokenId> doc = {1, 5, 7};
  EXPECT_EQ(encode_light(back.encoder(), doc), encode_light(m.encoder(), doc));
  EXPECT_EQ(back.phi_weight().value, m.phi_weight().value);
  back.save(dir / "t.ckpt");
  EXPECT_EQ(read_text(dir / "s.ckpt"), read_text(dir / "t.ckpt"));
}

TEST(RankOneStep, DotProductsAgainstCounterpart) {
  std::vector<Tensor> nb = {vec({1, 0}), vec({0, 1})};
  EXPECT_EQ(rank_one_step(vec({1, 0}), ptrs(nb)), (std::vector<double>{1, 0}));
  std::vector<Tensor> bad = {vec({1, 0, 0})};
  EXPECT_THROW(rank_one_step(vec({1, 0}), ptrs(bad)), DimensionError);
}

TEST(RankOneStep, PointwiseAndBatchEqualsSingle) {
  auto rng = make_rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> nb;
    for (int i = 0; i < 7; ++i) nb.push_back(random_vec(rng, 5));
    Tensor c = random_vec(rng, 5);
    auto all = rank_one_step(c, ptrs(nb));
    for (std::size_t i = 0; i < nb.size(); ++i) {
      std::vector<Tensor> one = {nb[i]};
      EXPECT_EQ(rank_one_step(c, ptrs(one))[0], all[i]);
      EXPECT_EQ(all[i], oracle::dot(nb[i], c));
    }
  }
}

TEST(RankOneStep, DocumentOverloadAndSimAgree) {
  SelectorModel m(cfg(RankingMode::OneStep), 2);
  Document q{"q", {1, 2, 3}}, k{"k", {4, 5}}, n{"n", {1, 2, 3}};
  const Document* nb[] = {&n};
  EXPECT_EQ(rank_one_step(m, k, nb)[0], sim(m, q, k));
  EXPECT_EQ(sim(m, q, k), sim(m, k, q));
  const Tensor e = encode_light(m.encoder(), q.tokens);
  EXPECT_EQ(sim(e, e), e.squaredNorm());
}

TEST(RankOneStep, ScaleEquivarianceKeepsOrder) {
  auto rng = make_rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> nb, scaled;
    for (int i = 0; i < 9; ++i) nb.push_back(random_vec(rng, 4));
    Tensor c = random_vec(rng, 4);
    const double s = 0.1 + 4.0 * uniform01(rng);
    for (const auto& t : nb) scaled.push_back(t * s);
    auto a = rank_one_step(c, ptrs(nb));
    auto b = rank_one_step(Tensor(c * s), ptrs(scaled));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] * s * s, 1e-9 * (1 + std::abs(a[i])));
    EXPECT_EQ(truncate(a, TruncationPolicy::fixed_k(5)).selected, truncate(b, TruncationPolicy::fixed_k(5)).selected);
  }
}

TEST(RankMultiStep, MatchesExhaustiveOracle) {
  auto rng = make_rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    SelectorModel m(cfg(RankingMode::MultiStep, 20, 5), 100 + static_cast<std::uint64_t>(trial));
    const std::size_t n = 1 + uniform_index(rng, 8), k = 1 + uniform_index(rng, 3);
    std::vector<Tensor> nb;
    for (std::size_t i = 0; i < n; ++i) nb.push_back(random_vec(rng, 5));
    Tensor center = random_vec(rng, 5), cp = random_vec(rng, 5);
    auto got = rank_multi_step(m, center, cp, ptrs(nb), k);
    EXPECT_EQ(got.order, oracle::selector_greedy(m, center, cp, nb, k)) << "trial " << trial;
    ASSERT_EQ(got.scores.size(), got.order.size());
    EXPECT_EQ(got.order.size(), std::min(n, k));
    // The recorded score of each pick equals a from-scratch evaluation.
    std::vector<const Tensor*> set;
    for (std::size_t s = 0; s < got.order.size(); ++s) {
      set.push_back(&nb[got.order[s]]);
      const double ref = oracle::multi_step_value(m, center, cp, set);
      EXPECT_NEAR(got.scores[s], ref, 1e-12 * (1 + std::abs(ref)));
      std::vector<const Tensor*> prev(set.begin(), set.end() - 1);
      EXPECT_NEAR(multi_step_score(m, center, cp, prev, nb[got.order[s]]), ref, 1e-12 * (1 + std::abs(ref)));
    }
  }
}

TEST(RankMultiStep, ExhaustsWhenKAtLeastN) {
  SelectorModel m(cfg(RankingMode::MultiStep, 20, 4), 2);
  auto rng = make_rng(2);
  std::vector<Tensor> nb;
  for (int i = 0; i < 5; ++i) nb.push_back(random_vec(rng, 4));
  auto r = rank_multi_step(m, random_vec(rng, 4), random_vec(rng, 4), ptrs(nb), 9);
  std::set<std::size_t> all(r.order.begin(), r.order.end());
  EXPECT_EQ(all.size(), 5u);
  EXPECT_THROW(rank_multi_step(m, nb[0], nb[1], ptrs(nb), 0), ConfigError);
}

TEST(RankMultiStep, DuplicateNeighborLeavesPooledStateUnchanged) {
  SelectorModel m(cfg(RankingMode::MultiStep, 20, 4), 6);
  auto rng = make_rng(6);
  Tensor center = random_vec(rng, 4), cp = random_vec(rng, 4), x = random_vec(rng, 4);
  std::vector<const Tensor*> none;
  const Tensor* with_x[] = {&x};
  EXPECT_EQ(multi_step_score(m, center, cp, with_x, x), multi_step_score(m, center, cp, none, x));
}

TEST(RankMultiStep, TiesGoToTheLowestIndex) {
  SelectorModel m(cfg(RankingMode::MultiStep, 20, 3), 1);
  std::vector<Tensor> nb(4, vec({0.2, -0.1, 0.3}));
  auto r = rank_multi_step(m, vec({1, 0, 0}), vec({0, 1, 0}), ptrs(nb), 4);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Truncate, SpecExamples) {
  const std::vector<double> s = {0.9, 0.5, 0.1};
  EXPECT_EQ(truncate(s, TruncationPolicy::fixed_k(2)).selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(truncate(s, TruncationPolicy::absolute(0.4)).selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(truncate(s, TruncationPolicy::absolute(0.95)).selected.empty());
  auto r = truncate(s, TruncationPolicy::relevance(), {.sim = 0.3});
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.scores, (std::vector<double>{0.9, 0.5}));
}

TEST(Truncate, OverallRankingUnifiedList) {
  const std::vector<std::vector<double>> lists = {{0.9, 0.2}, {0.8, 0.7}};
  TruncationContext c0, c1;
  c0.overall = OverallContext{lists, 0};
  c1.overall = OverallContext{lists, 1};
  EXPECT_EQ(truncate(lists[0], TruncationPolicy::overall(3), c0).selected.size(), 1u);
  EXPECT_EQ(truncate(lists[1], TruncationPolicy::overall(3), c1).selected, (std::vector<std::size_t>{0, 1}));
}

TEST(Truncate, MissingContextIsConfigError) {
  const std::vector<double> s = {1, 2};
  EXPECT_THROW(truncate(s, TruncationPolicy::relevance()), ConfigError);
  EXPECT_THROW(truncate(s, TruncationPolicy::overall(1)), ConfigError);
  TruncationPolicy p = TruncationPolicy::fixed_k(1);
  p.tau = 0.5;
  EXPECT_THROW(truncate(s, p), ConfigError);
  EXPECT_THROW(truncate(s, TruncationPolicy::fixed_k(1, 0)), ConfigError);
}

TEST(Truncate, AllEqualScoresKeepTheFirstByIndex) {
  const std::vector<double> s(9, 0.25);
  EXPECT_EQ(truncate(s, TruncationPolicy::fixed_k(5)).selected, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Truncate, MonotoneInThresholdAndKAndCapped) {
  auto rng = make_rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = uniform_index(rng, 60);
    std::vector<double> s(n);
    // Coarse values so that ties occur.
    for (auto& x : s) x = std::round(normal(rng) * 4.0) / 4.0;
    const double t1 = normal(rng), t2 = t1 + std::abs(normal(rng));
    const auto a1 = as_set(truncate(s, TruncationPolicy::absolute(t1, 1000)));
    const auto a2 = as_set(truncate(s, TruncationPolicy::absolute(t2, 1000)));
    EXPECT_TRUE(std::includes(a1.begin(), a1.end(), a2.begin(), a2.end()));
    const std::size_t k1 = uniform_index(rng, 30), k2 = k1 + uniform_index(rng, 30);
    const auto f1 = as_set(truncate(s, TruncationPolicy::fixed_k(k1, 1000)));
    const auto f2 = as_set(truncate(s, TruncationPolicy::fixed_k(k2, 1000)));
    EXPECT_TRUE(std::includes(f2.begin(), f2.end(), f1.begin(), f1.end()));
    for (auto p : {TruncationPolicy::fixed_k(k2), TruncationPolicy::absolute(t1)}) {
      EXPECT_LE(truncate(s, p).selected.size(), kDefaultHardCap);
    }
    EXPECT_LE(truncate(s, TruncationPolicy::relevance(), {.sim = t1}).selected.size(), kDefaultHardCap);
  }
}

TEST(SelectorLoss, ClosedFormsAtZeroAndLimits) {
  Tape t;
  Var zero = t.constant(Tensor::Zero(1, 1));
  EXPECT_NEAR(selector_loss_from_delta(zero, LossMode::Literal).scalar(), -0.5, 1e-12);
  EXPECT_NEAR(selector_loss_from_delta(zero, LossMode::Log).scalar(), -std::log(0.5), 1e-12);
  Var big = t.constant(Tensor::Constant(1, 1, 60.0));
  EXPECT_NEAR(selector_loss_from_delta(big, LossMode::Literal).scalar(), -1.0, 1e-12);
  EXPECT_NEAR(selector_loss_from_delta(big, LossMode::Log).scalar(), 0.0, 1e-12);
}

TEST(SelectorScore, GradCheckBothModes) {
  for (auto mode : {RankingMode::OneStep, RankingMode::MultiStep}) {
    SelectorModel m(cfg(mode, 12, 4), 8);
    std::vector<std::vector<TokenId>> docs = {{1, 2, 3}, {4, 5}, {6, 7, 8}, {9}, {10, 11, 2}};
    auto f = [&](Tape& t, ParamStore&) {
      auto e = [&](int i) { return m.encoder().encode(t, docs[i]); };
      std::vector<Var> ctx = {e(4)};
      Var d = sub(selector_score(t, m, e(0), e(1), ctx, e(2)), selector_score(t, m, e(0), e(1), ctx, e(3)));
      return selector_loss_from_delta(d, LossMode::Log);
    };
    auto r = grad_check(f, m.params());
    EXPECT_LE(r.max_rel_error, 1e-4) << ranking_mode_name(mode) << " " << r.worst_param;
  }
}

namespace {

// Pairs labeled by topic overlap with the counterpart.
PairDataset oracle_pairs(const GeneratedData& d, std::span<const MatchTask> tasks) {
  AnnotationSet ann;
  for (const auto& t : tasks) {
    TaskAnnotation ta{t.id, {}};
    for (Side side : {Side::Query, Side::Key}) {
      for (auto n : oracle::side_list(t, side)) {
        const bool plus = usefulness_oracle(d.truth, t, side, 0, n);
        ta.labels.push_back({side, n, plus, plus ? 1.0 : -1.0, -1});
      }
    }
    ann.tasks.push_back(ta);
  }
  return build_pairs(ann, tasks, 20, 1);
}

}  // namespace

TEST(TrainSelector, LearnsTopicPreferenceAboveChance) {
  GenConfig gc;
  gc.num_nodes = 300;
  gc.num_topics = 4;
  gc.intra_p = 0.1;
  gc.inter_p = 0.01;
  auto d = generate_graph(gc);
  auto pos = sample_positive_edges(d.graph, 150, 0, 0, 2);
  auto tasks = build_tasks(d.graph, edges_of(pos, Split::Train), 0, 20, 3);
  auto pairs = oracle_pairs(d, tasks);
  ASSERT_GT(pairs.records.size(), 100u);
  SelectorTrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 32;
  tc.lr = 1e-2;
  tc.holdout_fraction = 0.2;
  auto res = train_selector(d.graph, pairs, cfg(RankingMode::OneStep, d.graph.vocab_size(), 16), tc);
  EXPECT_GT(res.holdout_pairs, 0u);
  EXPECT_GT(res.holdout_accuracy, 0.6);
  EXPECT_LT(res.loss_curve.back(), res.loss_curve.front());

  auto again = train_selector(d.graph, pairs, cfg(RankingMode::OneStep, d.graph.vocab_size(), 16), tc);
  TempDir dir;
  res.model.save(dir / "a");
  again.model.save(dir / "b");
  EXPECT_EQ(read_text(dir / "a"), read_text(dir / "b"));
}

TEST(TrainSelector, LossDecreasesOnToyFullBatch) {
  auto g = cdsm::testing::make_graph({"a b", "c d", "a x", "c y", "q r", "s t", "a c", "b d", "x y", "r s", "t q", "u v"},
                                     {});
  PairDataset p;
  for (NodeId i = 0; i < 10; ++i) {
    p.records.push_back({i, Side::Query, 0, 1, {}, static_cast<NodeId>(2 + i % 2), static_cast<NodeId>(4 + i % 8)});
  }
  for (auto mode : {RankingMode::OneStep, RankingMode::MultiStep}) {
    SelectorTrainConfig tc;
    tc.batch_size = 10;
    tc.steps = 10;
    tc.holdout_fraction = 0.0;
    auto res = train_selector(g, p, cfg(mode, g.vocab_size(), 8), tc);
    for (std::size_t i = 1; i < res.loss_curve.size(); ++i) {
      EXPECT_LT(res.loss_curve[i], res.loss_curve[i - 1]) << ranking_mode_name(mode) << " step " << i;
    }
  }
}

TEST(TrainSelector, RejectsEmptyPairs) {
  auto g = cdsm::testing::make_graph({"a"}, {});
  EXPECT_THROW(train_selector(g, PairDataset{}, cfg(RankingMode::OneStep, 1, 4), SelectorTrainConfig{}), ConfigError);
}

TEST(PairwiseAccuracy, CountsStrictWins) {
  auto g = cdsm::testing::make_graph({"a", "b", "c"}, {});
  SelectorModel m(cfg(RankingMode::OneStep, g.vocab_size(), 4), 1);
  LightEncodings enc = {vec({1, 0, 0, 0}), vec({1, 0, 0, 0}), vec({0, 1, 0, 0})};
  std::vector<PairRecord> r = {{0, Side::Query, 0, 0, {}, 1, 2}, {0, Side::Query, 0, 0, {}, 2, 1},
                               {0, Side::Query, 0, 0, {}, 1, 1}};
  EXPECT_DOUBLE_EQ(pairwise_accuracy(m, enc, r), 1.0 / 3.0);
}
