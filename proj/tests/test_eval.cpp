#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"

using namespace fairdda;
namespace ts = testing_support;

namespace {

const double kLn2 = std::log(2.0);

// Single-column embeddings so x_u . x_v = item score for user 0.
Tensor<double> column(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(n, 1, std::move(v));
}

TopKTable table_of(std::vector<std::uint32_t> users, std::vector<std::vector<std::uint32_t>> items, std::size_t k) {
  TopKTable t;
  t.k = k;
  t.users = std::move(users);
  t.items = std::move(items);
  return t;
}

Tensor<double> integer_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-2, 2);
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

}  // namespace

TEST(TopK, ReturnsAllCandidatesWhenKExceedsThem) {
  const auto u = column({1.0});
  const auto v = column({0.5, 2.0, 1.0});
  const std::vector<std::uint32_t> users{0};
  const auto t = topk(u, v, {{2}}, users, 10);
  ASSERT_EQ(t.items.size(), 1u);
  EXPECT_EQ(t.items[0], (std::vector<std::uint32_t>{1, 0}));
}

TEST(TopK, TiesGoToLowerItemId) {
  const auto u = column({1.0});
  const auto v = column({1.0, 3.0, 1.0, 3.0, 1.0});
  const std::vector<std::uint32_t> users{0};
  const auto t = topk(u, v, {}, users, 4);
  EXPECT_EQ(t.items[0], (std::vector<std::uint32_t>{1, 3, 0, 2}));
}

TEST(TopK, RejectsBadArguments) {
  const auto u = column({1.0});
  const std::vector<std::uint32_t> users{0};
  EXPECT_THROW(topk(u, column({1.0}), {}, users, 0), Error);
  EXPECT_THROW(topk(u, Tensor<double>(3, 2), {}, users, 1), ShapeError);
}

TEST(TopK, MatchesExhaustiveSort) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto u = integer_tensor(5, 2, rng);
    const auto v = integer_tensor(6, 2, rng);
    std::vector<std::vector<std::uint32_t>> ex(5);
    for (auto& e : ex)
      for (std::uint32_t j = 0; j < 6; ++j)
        if (rng() % 4 == 0) e.push_back(j);
    const std::vector<std::uint32_t> users{0, 1, 2, 3, 4};
    for (std::size_t k = 1; k <= 6; ++k) {
      const auto t = topk(u, v, ex, users, k);
      for (std::uint32_t i = 0; i < 5; ++i) {
        std::vector<std::uint32_t> cand;
        for (std::uint32_t j = 0; j < 6; ++j)
          if (std::find(ex[i].begin(), ex[i].end(), j) == ex[i].end()) cand.push_back(j);
        std::stable_sort(cand.begin(), cand.end(), [&](auto a, auto b) {
          return u(i, 0) * v(a, 0) + u(i, 1) * v(a, 1) > u(i, 0) * v(b, 0) + u(i, 1) * v(b, 1);
        });
        cand.resize(std::min(k, cand.size()));
        EXPECT_EQ(t.items[i], cand);
      }
    }
  }
}

TEST(TopK, TruncationKeepsPrefix) {
  const auto t = table_of({0, 1}, {{4, 2, 1}, {0, 3}}, 3);
  const auto s = t.truncated(2);
  EXPECT_EQ(s.k, 2u);
  EXPECT_EQ(s.items[0], (std::vector<std::uint32_t>{4, 2}));
  EXPECT_EQ(s.items[1], (std::vector<std::uint32_t>{0, 3}));
}

TEST(Utility, SingleRelevantAtRankOneGivesNdcgOne) {
  const auto t = table_of({0}, {{3, 1, 2}}, 3);
  const auto m = recall_ndcg(t, {{3}}, 3);
  EXPECT_DOUBLE_EQ(m.ndcg, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, 1.0);
  EXPECT_EQ(m.users, 1u);
}

TEST(Utility, HandComputedPartialHit) {
  // Two relevant items, one hit at rank 2: recall 1/2, NDCG (1/log2 3)/(1 + 1/log2 3).
  const auto t = table_of({0}, {{5, 7, 1}}, 3);
  const auto m = recall_ndcg(t, {{7, 9}}, 3);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  const double g = 1.0 / std::log2(3.0);
  EXPECT_NEAR(m.ndcg, g / (1.0 + g), 1e-15);
}

TEST(Utility, NoHitsGiveZeroAndEmptyRelevantIsSkipped) {
  const auto t = table_of({0, 1}, {{1, 2}, {3, 4}}, 2);
  const auto m = recall_ndcg(t, {{7}, {}}, 2);
  EXPECT_EQ(m.users, 1u);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.ndcg, 0.0);
}

TEST(Jsd, BasicValues) {
  const std::vector<double> p{0.2, 0.3, 0.5}, q{0.6, 0.1, 0.3};
  EXPECT_EQ(jsd(p, p), 0.0);
  const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  EXPECT_NEAR(jsd(a, b), kLn2, 1e-15);
  EXPECT_NEAR(jsd(p, q), jsd(q, p), 1e-12);
  EXPECT_NEAR(jsd(p, q), ts::brute_jsd(p, q), 1e-15);
  EXPECT_GT(jsd(p, q), 0.0);
  EXPECT_LE(jsd(p, q), kLn2);
}

TEST(Jsd, RejectsInvalidInput) {
  const std::vector<double> p{0.5, 0.6}, q{0.5, 0.5}, r{1.5, -0.5}, s{1.0};
  EXPECT_THROW(jsd(p, q), Error);
  EXPECT_THROW(jsd(r, q), Error);
  EXPECT_THROW(jsd(s, q), Error);
}

TEST(Parity, IdenticalListsGiveZero) {
  const auto t = table_of({0, 1, 2, 3}, {{0, 1}, {0, 1}, {1, 0}, {0, 1}}, 2);
  const std::vector<std::uint32_t> attr{0, 0, 1, 1};
  const std::vector<std::vector<std::uint32_t>> rel{{0}, {1}, {0}, {1}};
  EXPECT_NEAR(*dp_at_k(t, attr, 2, 4), 0.0, 1e-15);
  EXPECT_NEAR(*eo_at_k(t, rel, attr, 2, 4), 0.0, 1e-15);
}

TEST(Parity, DisjointExposureGivesLn2) {
  const auto t = table_of({0, 1}, {{0}, {1}}, 1);
  const std::vector<std::uint32_t> attr{0, 1};
  EXPECT_NEAR(*dp_at_k(t, attr, 2, 3), kLn2, 1e-15);
  EXPECT_NEAR(*eo_at_k(t, {{0}, {1}}, attr, 2, 3), kLn2, 1e-15);
}

TEST(Parity, DegenerateCasesAreFlagged) {
  const auto t = table_of({0, 1}, {{0}, {1}}, 1);
  const std::vector<std::uint32_t> one_group{0, 0};
  EXPECT_FALSE(dp_at_k(t, one_group, 2, 3).has_value());
  const std::vector<std::uint32_t> attr{0, 1};
  EXPECT_FALSE(eo_at_k(t, {{2}, {2}}, attr, 2, 3).has_value());
  // one group has hits, the other none
  EXPECT_FALSE(eo_at_k(t, {{0}, {2}}, attr, 2, 3).has_value());
}

TEST(Parity, ThreeGroupsAverageOverPairs) {
  const auto t = table_of({0, 1, 2}, {{0}, {1}, {0}}, 1);
  const std::vector<std::uint32_t> attr{0, 1, 2};
  // pairs (0,1)=ln2, (0,2)=0, (1,2)=ln2
  EXPECT_NEAR(*dp_at_k(t, attr, 3, 2), 2.0 * kLn2 / 3.0, 1e-15);
  // a class with no users is left out
  EXPECT_NEAR(*dp_at_k(t, attr, 4, 2), 2.0 * kLn2 / 3.0, 1e-15);
}

TEST(Parity, ExposureIsNormalizedByGroupSize) {
  // Group 0 has three users all seeing item 0; group 1 has one user seeing item 0.
  const auto t = table_of({0, 1, 2, 3}, {{0}, {0}, {0}, {0}}, 1);
  const std::vector<std::uint32_t> attr{0, 0, 0, 1};
  const auto g = dp_exposure(t, attr, 2, 2);
  EXPECT_EQ(g.group_users, (std::vector<std::size_t>{3, 1}));
  EXPECT_DOUBLE_EQ(g.raw[0][0], 1.0);
  EXPECT_DOUBLE_EQ(g.raw[1][0], 1.0);
  EXPECT_NEAR(*dp_at_k(t, attr, 2, 2), 0.0, 1e-15);
}

TEST(Metrics, MatchBruteForceExactly) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + rng() % 9, n = 2 + rng() % 9;
    const auto ue = integer_tensor(m, 3, rng);
    const auto ie = integer_tensor(n, 3, rng);
    std::vector<std::vector<double>> scores(m, std::vector<double>(n));
    for (std::size_t u = 0; u < m; ++u)
      for (std::size_t v = 0; v < n; ++v)
        for (std::size_t c = 0; c < 3; ++c) scores[u][v] += ue(u, c) * ie(v, c);
    std::vector<std::set<std::uint32_t>> ex(m), rel(m);
    std::vector<std::vector<std::uint32_t>> exv(m), relv(m);
    std::vector<std::uint32_t> attr(m), users;
    for (std::uint32_t u = 0; u < m; ++u) {
      attr[u] = static_cast<std::uint32_t>(rng() % 2);
      for (std::uint32_t v = 0; v < n; ++v) {
        const auto r = rng() % 5;
        if (r == 0) {
          ex[u].insert(v);
          exv[u].push_back(v);
        } else if (r == 1) {
          rel[u].insert(v);
          relv[u].push_back(v);
        }
      }
      if (!rel[u].empty()) users.push_back(u);
    }
    if (users.empty()) continue;
    EvalContext ctx{exv, relv, users, attr, 2, n};
    const std::vector<std::size_t> ks{1, 2, 3};
    const auto rep = evaluate(ue, ie, ctx, ks);
    for (auto k : ks) {
      const auto b = ts::brute_metrics(scores, ex, rel, attr, k);
      const auto& got = rep.at.at(k);
      EXPECT_EQ(got.recall, b.recall) << "trial " << trial << " k " << k;
      EXPECT_EQ(got.ndcg, b.ndcg) << "trial " << trial << " k " << k;
      ASSERT_EQ(got.dp.has_value(), b.dp.has_value());
      ASSERT_EQ(got.eo.has_value(), b.eo.has_value());
      if (b.dp) {
        EXPECT_EQ(*got.dp, *b.dp);
      }
      if (b.eo) {
        EXPECT_EQ(*got.eo, *b.eo);
      }
    }
  }
}

TEST(Metrics, BoundedAndInvariantToGroupRelabelling) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 12, n = 15;
    const auto ue = ts::random_tensor(m, 4, rng);
    const auto ie = ts::random_tensor(n, 4, rng);
    std::vector<std::vector<std::uint32_t>> rel(m);
    std::vector<std::uint32_t> attr(m), swapped(m), users;
    for (std::uint32_t u = 0; u < m; ++u) {
      attr[u] = u % 2;
      swapped[u] = 1 - attr[u];
      for (std::uint32_t v = 0; v < n; ++v)
        if (rng() % 3 == 0) rel[u].push_back(v);
      if (!rel[u].empty()) users.push_back(u);
    }
    EvalContext a{{}, rel, users, attr, 2, n};
    EvalContext b{{}, rel, users, swapped, 2, n};
    const std::vector<std::size_t> ks{1, 5, 10};
    const auto ra = evaluate(ue, ie, a, ks);
    const auto rb = evaluate(ue, ie, b, ks);
    for (auto k : ks) {
      const auto& x = ra.at.at(k);
      const auto& y = rb.at.at(k);
      EXPECT_GE(x.recall, 0.0);
      EXPECT_LE(x.recall, 1.0);
      EXPECT_GE(x.ndcg, 0.0);
      EXPECT_LE(x.ndcg, 1.0);
      ASSERT_TRUE(x.dp && y.dp);
      EXPECT_GE(*x.dp, 0.0);
      EXPECT_LE(*x.dp, kLn2 + 1e-12);
      EXPECT_NEAR(*x.dp, *y.dp, 1e-12);
      if (x.eo) {
        EXPECT_GE(*x.eo, 0.0);
        EXPECT_LE(*x.eo, kLn2 + 1e-12);
        ASSERT_TRUE(y.eo);
        EXPECT_NEAR(*x.eo, *y.eo, 1e-12);
      }
    }
  }
}

TEST(Metrics, GroupAlignedModelIsLessFairThanRandomModel) {
  SyntheticOptions so;
  so.seed = 4;
  SyntheticLayout layout;
  const auto ds = generate_synthetic(so, &layout);
  const auto data = prepare<double>(ds, split_dataset(ds, {}, 4));
  const std::size_t c = ds.num_classes;
  // Users point at their group's pool; items carry their pool indicator.
  Tensor<double> ub(ds.num_users, c + 1), ib(ds.num_items, c + 1);
  for (std::size_t u = 0; u < ds.num_users; ++u) ub(u, ds.attribute[u]) = 1.0;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> jitter(0.0, 1e-3);
  for (std::size_t v = 0; v < ds.num_items; ++v) {
    ib(v, layout.item_pool[v]) = 1.0;
    ib(v, c) = jitter(rng);
  }
  const auto ur = ts::random_tensor(ds.num_users, 8, rng);
  const auto ir = ts::random_tensor(ds.num_items, 8, rng);
  const std::vector<std::size_t> ks{10};
  const auto biased = evaluate(ub, ib, data.test, ks).at.at(10);
  const auto random = evaluate(ur, ir, data.test, ks).at.at(10);
  ASSERT_TRUE(biased.dp && random.dp);
  EXPECT_GT(*biased.dp, *random.dp);
  EXPECT_GT(*biased.dp, 0.5);
}

TEST(Evaluate, TruncatedListsAgreeWithDirectTopK) {
  std::mt19937_64 rng(8);
  const auto ue = ts::random_tensor(6, 3, rng);
  const auto ie = ts::random_tensor(9, 3, rng);
  std::vector<std::vector<std::uint32_t>> ex(6), rel(6);
  std::vector<std::uint32_t> users, attr{0, 1, 0, 1, 0, 1};
  for (std::uint32_t u = 0; u < 6; ++u) {
    ex[u] = {u};
    rel[u] = {(u + 1) % 9, (u + 4) % 9};
    users.push_back(u);
  }
  EvalContext ctx{ex, rel, users, attr, 2, 9};
  const std::vector<std::size_t> ks{2, 5};
  const auto rep = evaluate(ue, ie, ctx, ks);
  EXPECT_EQ(rep.evaluated_users, 6u);
  for (auto k : ks) {
    const auto t = topk(ue, ie, ex, users, k);
    const auto util = recall_ndcg(t, rel, k);
    EXPECT_EQ(rep.at.at(k).ndcg, util.ndcg);
    EXPECT_EQ(rep.at.at(k).recall, util.recall);
    EXPECT_EQ(rep.at.at(k).dp, dp_at_k(t, attr, 2, 9));
  }
  EXPECT_TRUE(evaluate(ue, ie, ctx, std::span<const std::size_t>{}).at.empty());
}

TEST(Stats, SampleStatsAndWelch) {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10};
  const auto s = sample_stats(a);
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.stddev, std::sqrt(2.5), 1e-15);
  EXPECT_EQ(s.n, 5u);
  // reference p-values from an independent statistics package
  EXPECT_NEAR(welch_t_test(a, b), 0.10753119493062718, 1e-9);
  const std::vector<double> c{0.31, 0.29, 0.35, 0.30}, d{0.22, 0.25, 0.21, 0.24, 0.26};
  EXPECT_NEAR(welch_t_test(c, d), 0.0036503314484320364, 1e-9);
  EXPECT_NEAR(welch_t_test(c, d), welch_t_test(d, c), 1e-15);
  const std::vector<double> one{1.0};
  EXPECT_TRUE(std::isnan(welch_t_test(one, b)));
}
