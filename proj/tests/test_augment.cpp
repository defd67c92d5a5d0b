#include <gtest/gtest.h>

#include <filesystem>
#include <memory>
#include <random>

#include "support.hpp"

using namespace fairdda;
namespace ts = testing_support;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// Small random setting with a frozen performance model and biased representations.
struct Fixture {
  std::mt19937_64 rng{11};
  InteractionGraph graph = ts::random_graph(8, 7, 0.35, rng);
  std::shared_ptr<const NormalizedAdjacency<double>> adj = std::make_shared<const NormalizedAdjacency<double>>(graph);
  std::size_t d = 4;
  Tensor<double> perf_u = ts::random_tensor(8, d, rng), perf_v = ts::random_tensor(7, d, rng);
  Tensor<double> bias_u = ts::random_tensor(8, d, rng), bias_v = ts::random_tensor(7, d, rng);
  FeedForwardNet<double> detector = FeedForwardNet<double>::detector(d, rng);

  AugmentContext<double> context() const {
    AugmentContext<double> c;
    c.adjacency = adj.get();
    const auto p = propagate_values<double>(adj->view(), perf_u, perf_v, 2);
    c.performance_ranks = relative_ranks_values(p.users, p.items, graph);
    const auto b = propagate_values<double>(adj->view(), bias_u, bias_v, 2);
    c.biased_users = b.users;
    c.biased_items = b.items;
    return c;
  }
};

}  // namespace

TEST(RelativeRanks, HandExample) {
  // one user, two items with scores sigma(.) = 0.8 and 0.6
  InteractionGraph g(1, 2, {{0, 0}, {0, 1}});
  Tensor<double> u(1, 1, 1.0), v(2, 1, std::vector<double>{logit(0.8), logit(0.6)});
  const auto r = relative_ranks_values(u, v, g);
  EXPECT_NEAR(r[0], 0.1, 1e-12);
  EXPECT_NEAR(r[1], -0.1, 1e-12);
}

TEST(RelativeRanks, SingleItemUserIsZero) {
  InteractionGraph g(2, 3, {{0, 2}, {1, 0}, {1, 1}});
  std::mt19937_64 rng(1);
  const auto r = relative_ranks_values(ts::random_tensor(2, 3, rng), ts::random_tensor(3, 3, rng), g);
  EXPECT_EQ(r[0], 0.0);
}

TEST(RelativeRanks, CenteredPerUserAndTapeAgrees) {
  std::mt19937_64 rng(2);
  const auto g = ts::random_graph(10, 9, 0.4, rng);
  for (int fam = 0; fam < 2; ++fam) {
    const auto u = ts::random_tensor(10, 5, rng, -2, 2), v = ts::random_tensor(9, 5, rng, -2, 2);
    const auto r = relative_ranks_values(u, v, g);
    for (std::uint32_t user = 0; user < 10; ++user) {
      const auto [a, b] = g.user_edge_range(user);
      double s = 0.0;
      for (auto e = a; e < b; ++e) s += r[e];
      EXPECT_NEAR(s, 0.0, 1e-5);
    }
    Tape<double> t;
    const auto taped = relative_ranks(t.constant(u), t.constant(v), g).value();
    for (std::size_t e = 0; e < r.size(); ++e) EXPECT_NEAR(taped[e], r[e], 1e-15);
  }
}

TEST(RelativeRanks, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto g = ts::random_graph(5, 6, 0.4, rng);
  Parameter<double> u("u", ts::random_tensor(5, 3, rng)), v("v", ts::random_tensor(6, 3, rng));
  const auto c = ts::random_tensor(g.num_edges(), 1, rng);
  EXPECT_LT(ts::gradient_error({&u, &v},
                               [&](Tape<double>& t) {
                                 return sum(mul(relative_ranks(t.parameter(u), t.parameter(v), g), t.constant(c)));
                               }),
            1e-6);
}

TEST(RetentionProbs, HandValues) {
  const std::vector<double> dd{0.2, -0.1, 0.6, 0.0}, dp{0.2, 0.2, 0.1, 0.0};
  const auto p = retention_probs(dd, dp);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_NEAR(p[1], 0.74082, 1e-5);
  EXPECT_EQ(p[2], 1.0);  // e^0.5 clipped
  EXPECT_EQ(p[3], 1.0);
  EXPECT_THROW(retention_probs(dd, std::vector<double>{0.0}), ShapeError);
}

TEST(RetentionProbs, MonotoneBelowClipAndDirectional) {
  double prev = -1.0;
  for (double delta = -3.0; delta < 0.0; delta += 0.05) {
    const std::vector<double> dd{delta}, dp{0.0};
    const double p = retention_probs(dd, dp)[0];
    EXPECT_GT(p, prev);
    EXPECT_LT(p, 1.0);  // ranked lower by the debiased model: may be pruned
    prev = p;
  }
  for (double delta = 0.0; delta < 2.0; delta += 0.1) {
    const std::vector<double> dd{delta}, dp{0.0};
    EXPECT_EQ(retention_probs(dd, dp)[0], 1.0);
  }
}

TEST(Sampling, LiteralCertainEdgeAtUnitTemperature) {
  const double b = relaxed_sample(1.0, 0.0, 1.0, NoiseMode::Literal);
  EXPECT_DOUBLE_EQ(b, 0.5);
  EXPECT_EQ(hard_threshold(b), 1.0);
}

TEST(Sampling, VanishingProbabilityIsDropped) {
  for (auto mode : {NoiseMode::Logit, NoiseMode::Literal}) {
    const double b = relaxed_sample(1e-12, 0.0, 0.2, mode);
    EXPECT_LT(b, 1e-12);
    EXPECT_EQ(hard_threshold(b), 0.0);
  }
  std::mt19937_64 rng(4);
  const std::vector<double> p(1000, 0.0);
  for (auto m : {SampleMode::Hard, SampleMode::StraightThrough})
    for (double h : sample_mask(p, 0.2, rng, m).hard) EXPECT_EQ(h, 0.0);
}

TEST(Sampling, CertainEdgesAlwaysKeptInLogitMode) {
  std::mt19937_64 rng(5);
  const std::vector<double> p(5000, 1.0);
  const auto r = sample_mask(p, 0.01, rng, SampleMode::StraightThrough);
  for (double h : r.hard) EXPECT_EQ(h, 1.0);
  for (double x : r.relaxed) EXPECT_EQ(x, 1.0);
}

TEST(Sampling, HardRateMatchesProbability) {
  std::mt19937_64 rng(6);
  const double p0 = std::exp(-0.3);
  const std::vector<double> p(100000, p0);
  for (auto mode : {SampleMode::Hard, SampleMode::StraightThrough}) {
    const auto r = sample_mask(p, 0.2, rng, mode);
    double mean = 0.0;
    for (double h : r.hard) mean += h;
    mean /= static_cast<double>(p.size());
    EXPECT_NEAR(mean, 0.741, 0.01);
    const auto w = r.forward_weights<float>();
    for (float x : w) EXPECT_TRUE(x == 0.0f || x == 1.0f);
  }
}

TEST(Sampling, RejectsNonPositiveTemperature) {
  std::mt19937_64 rng(7);
  const std::vector<double> p{0.5};
  EXPECT_THROW(sample_mask(p, 0.0, rng, SampleMode::Relaxed), Error);
  EXPECT_THROW(sample_mask(p, -1.0, rng, SampleMode::Hard), Error);
  EXPECT_THROW(relaxed_sample(0.5, 0.0, 0.0, NoiseMode::Logit), Error);
  Tape<double> t;
  const std::vector<double> noise{0.0};
  EXPECT_THROW(sample_retention(t.constant(Tensor<double>(1, 1, -0.1)), noise, 0.0, NoiseMode::Logit,
                                SampleMode::Relaxed),
               Error);
}

TEST(Sampling, StraightThroughIsBinaryWithRelaxedGradient) {
  std::mt19937_64 rng(8);
  const std::size_t n = 40;
  Parameter<double> delta("delta", ts::random_tensor(n, 1, rng, -2.0, 0.3));
  const auto c = ts::random_tensor(n, 1, rng);
  const auto noise = sample_noise(n, NoiseMode::Logit, rng);
  auto run = [&](SampleMode m) {
    delta.zero_grad();
    Tape<double> t;
    auto w = sample_retention(t.parameter(delta), noise, 0.5, NoiseMode::Logit, m);
    const auto values = w.value();
    t.backward(sum(mul(w, t.constant(c))));
    return std::pair{values, delta.grad};
  };
  const auto [st_values, st_grad] = run(SampleMode::StraightThrough);
  const auto [rx_values, rx_grad] = run(SampleMode::Relaxed);
  for (std::size_t e = 0; e < n; ++e) {
    EXPECT_TRUE(st_values[e] == 0.0 || st_values[e] == 1.0);
    EXPECT_EQ(st_values[e], hard_threshold(rx_values[e]));
    EXPECT_DOUBLE_EQ(st_grad[e], rx_grad[e]);
  }
  // and the relaxed gradient is the true derivative of the relaxed sample
  for (auto mode : {NoiseMode::Logit, NoiseMode::Literal}) {
    EXPECT_LT(ts::gradient_error({&delta},
                                 [&](Tape<double>& t) {
                                   return sum(mul(sample_retention(t.parameter(delta), noise, 0.5, mode, SampleMode::Relaxed),
                                                  t.constant(c)));
                                 }),
              1e-5);
  }
}

TEST(FeatureMask, ZeroDetectorGivesExpMinusHalf) {
  std::mt19937_64 rng(9);
  auto det = FeedForwardNet<double>::detector(3, rng);
  for (auto* p : det.parameters()) p->value.fill(0.0);
  Tape<double> t;
  const auto f = feature_mask(det, t.constant(ts::random_tensor(4, 3, rng)), t.constant(ts::random_tensor(4, 3, rng))).value();
  for (double x : f.values()) EXPECT_NEAR(x, 0.60653, 1e-5);
}

TEST(FeatureMask, SaturatedDetectorApproachesExpMinusOne) {
  std::mt19937_64 rng(10);
  auto det = FeedForwardNet<double>::detector(2, rng);
  auto params = det.parameters();
  // hidden layer passes the input through, output layer amplifies it
  params[0]->value = Tensor<double>(2, 2, std::vector<double>{1, 0, 0, 1});
  params[1]->value.fill(0.0);
  params[2]->value = Tensor<double>(2, 2, std::vector<double>{100, 0, 0, 100});
  Tape<double> t;
  const auto f = feature_mask(det, t.constant(Tensor<double>(1, 2, 1.0)), t.constant(Tensor<double>(1, 2, 1.0))).value();
  for (double x : f.values()) EXPECT_NEAR(x, std::exp(-1.0), 1e-12);
}

TEST(FeatureMask, RangeAndShapeCheck) {
  std::mt19937_64 rng(11);
  auto det = FeedForwardNet<double>::detector(6, rng);
  Tape<double> t;
  const auto f = feature_mask(det, t.constant(ts::random_tensor(50, 6, rng, -3, 3)),
                              t.constant(ts::random_tensor(50, 6, rng, -3, 3)))
                     .value();
  for (double x : f.values()) {
    EXPECT_GT(x, std::exp(-1.0));
    EXPECT_LT(x, 1.0);
  }
  EXPECT_THROW(feature_mask(det, t.constant(Tensor<double>(2, 6)), t.constant(Tensor<double>(3, 6))), ShapeError);
}

TEST(AugmentFeatures, FactoringZeroAndOracle) {
  std::mt19937_64 rng(12);
  const auto x = ts::random_tensor(4, 3, rng);
  Tape<double> t;
  const auto same = augment_features(t.constant(x), t.constant(Tensor<double>(4, 3, 0.4))).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(same[i], 1.4 * x[i]);
  const auto zero = augment_features(t.constant(Tensor<double>(4, 3)), t.constant(ts::random_tensor(4, 3, rng, 0.4, 1.0))).value();
  for (double z : zero.values()) EXPECT_EQ(z, 0.0);
  const auto f = ts::random_tensor(4, 3, rng, std::exp(-1.0), 1.0);
  const auto a = augment_features(t.constant(x), t.constant(f)).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a(i, c), x(i, c) + x(i, c) * f(i, c), 1e-7);
}

TEST(AugmentFeatures, RowNormBounds) {
  std::mt19937_64 rng(13);
  auto det = FeedForwardNet<double>::detector(5, rng);
  Tape<double> t;
  const auto x = ts::random_tensor(30, 5, rng, -2, 2);
  auto f = feature_mask(det, t.constant(x), t.constant(ts::random_tensor(30, 5, rng)));
  const auto a = augment_features(t.constant(x), f).value();
  for (std::size_t r = 0; r < 30; ++r) {
    double nx = 0.0, na = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      nx += x(r, c) * x(r, c);
      na += a(r, c) * a(r, c);
    }
    EXPECT_GT(std::sqrt(na), (1.0 + std::exp(-1.0)) * std::sqrt(nx));
    EXPECT_LT(std::sqrt(na), 2.0 * std::sqrt(nx));
  }
}

TEST(AugmentedView, CertainRetentionKeepsGraph) {
  Fixture fx;
  auto ctx = fx.context();
  // debiased model equals the performance model, so every p is 1
  AugmentOptions opt;
  opt.layers = 2;
  opt.tau = 1e-6;
  opt.feature_masking = false;
  Tape<double> t;
  auto u0 = t.constant(fx.perf_u), v0 = t.constant(fx.perf_v);
  const auto deb = propagate(fx.adj->view(), u0, v0, 2);
  std::mt19937_64 rng(1);
  const auto noise = sample_noise(fx.graph.num_edges(), NoiseMode::Logit, rng);
  const auto view = build_augmented_view(ctx, u0, v0, deb, fx.detector, noise, opt);
  for (double w : view.weights->value().values()) EXPECT_EQ(w, 1.0);
  EXPECT_EQ(view.output.users.value(), deb.users.value());
  EXPECT_EQ(view.output.items.value(), deb.items.value());
}

TEST(AugmentedView, GradientReachesDebiasedTable) {
  Fixture fx;
  auto ctx = fx.context();
  Parameter<double> u("u", fx.bias_u), v("v", fx.bias_v);  // any table different from the performance one
  std::mt19937_64 rng(2);
  const auto noise = sample_noise(fx.graph.num_edges(), NoiseMode::Logit, rng);
  AugmentOptions opt;
  opt.layers = 2;
  opt.tau = 0.7;
  opt.sample_mode = SampleMode::Relaxed;
  const auto target = ts::random_tensor(8, fx.d, rng);
  auto loss = [&](Tape<double>& t) {
    auto u0 = t.parameter(u), v0 = t.parameter(v);
    const auto deb = propagate(fx.adj->view(), u0, v0, 2);
    const auto view = build_augmented_view(ctx, u0, v0, deb, fx.detector, noise, opt);
    return sum(mul(view.output.users, t.constant(target)));
  };
  EXPECT_LT(ts::gradient_error({&u, &v}, loss), 1e-4);
  double norm = 0.0;
  for (double g : u.grad.values()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(AugmentedView, SeedsChangeMasksNotProbabilities) {
  Fixture fx;
  auto ctx = fx.context();
  AugmentOptions opt;
  opt.layers = 2;
  auto run = [&](std::uint64_t seed) {
    Tape<double> t;
    auto u0 = t.constant(fx.bias_u), v0 = t.constant(fx.bias_v);
    const auto deb = propagate(fx.adj->view(), u0, v0, 2);
    std::mt19937_64 rng(seed);
    const auto noise = sample_noise(fx.graph.num_edges(), NoiseMode::Logit, rng);
    const auto view = build_augmented_view(ctx, u0, v0, deb, fx.detector, noise, opt);
    return std::pair{view.delta->value(), view.weights->value()};
  };
  const auto [d1, w1] = run(1);
  const auto [d2, w2] = run(2);
  EXPECT_EQ(d1, d2);
  EXPECT_NE(w1, w2);
}

TEST(AugmentedView, DisabledPartsAreAbsent) {
  Fixture fx;
  auto ctx = fx.context();
  AugmentOptions opt;
  opt.layers = 2;
  opt.edge_pruning = false;
  Tape<double> t;
  auto u0 = t.constant(fx.bias_u), v0 = t.constant(fx.bias_v);
  const auto deb = propagate(fx.adj->view(), u0, v0, 2);
  const auto view = build_augmented_view(ctx, u0, v0, deb, fx.detector, {}, opt);
  EXPECT_FALSE(view.weights.has_value());
  EXPECT_TRUE(view.user_mask.has_value());
}

TEST(DumpRetention, WritesOneRowPerEdge) {
  InteractionGraph g(1, 2, {{0, 0}, {0, 1}});
  std::mt19937_64 rng(3);
  const std::vector<double> dp{0.1, -0.1}, dd{0.0, 0.0};
  const auto r = sample_mask(retention_probs(dd, dp), 0.2, rng, SampleMode::StraightThrough);
  const auto path = (std::filesystem::temp_directory_path() / "fairdda_retention.tsv").string();
  dump_retention(path, g, dp, dd, r);
  std::ifstream in(path);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  std::filesystem::remove(path);
}
