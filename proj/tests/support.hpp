#pragma once

// Shared helpers for the test binaries: random instances, finite differences
// and independent reference implementations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "fairdda.hpp"

namespace testing_support {

using namespace fairdda;

template <typename T = double>
Tensor<T> random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(r, c);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

// Random bipartite graph where every user and item has at least one edge.
inline InteractionGraph random_graph(std::size_t m, std::size_t n, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(density);
  std::vector<Edge> edges;
  for (std::uint32_t u = 0; u < m; ++u)
    for (std::uint32_t v = 0; v < n; ++v)
      if (keep(rng)) edges.push_back({u, v});
  for (std::uint32_t u = 0; u < m; ++u) edges.push_back({u, static_cast<std::uint32_t>(rng() % n)});
  for (std::uint32_t v = 0; v < n; ++v) edges.push_back({static_cast<std::uint32_t>(rng() % m), v});
  return InteractionGraph(m, n, std::move(edges));
}

// Dense LightGCN reference built from the raw 0/1 adjacency.
inline std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> dense_lightgcn(
    const InteractionGraph& g, const std::vector<double>& weights, const Tensor<double>& u0,
    const Tensor<double>& v0, std::size_t layers) {
  const std::size_t m = g.num_users(), n = g.num_items(), d = u0.cols();
  std::vector<std::vector<double>> a(m, std::vector<double>(n, 0.0));
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    a[g.edges()[e].user][g.edges()[e].item] = weights.empty() ? 1.0 : weights[e];
  std::vector<double> du(m, 0.0), dv(n, 0.0);
  for (const auto& e : g.edges()) {
    du[e.user] += 1.0;
    dv[e.item] += 1.0;
  }
  std::vector<std::vector<double>> ahat(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (a[i][j] != 0.0) ahat[i][j] = a[i][j] / std::sqrt(du[i] * dv[j]);
  std::vector<std::vector<double>> cu(m, std::vector<double>(d)), cv(n, std::vector<double>(d));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) cu[i][k] = u0(i, k);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < d; ++k) cv[j][k] = v0(j, k);
  auto su = cu, sv = cv;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<std::vector<double>> nu(m, std::vector<double>(d, 0.0)), nv(n, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < d; ++k) {
          nu[i][k] += ahat[i][j] * cv[j][k];
          nv[j][k] += ahat[i][j] * cu[i][k];
        }
    cu = nu;
    cv = nv;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d; ++k) su[i][k] += cu[i][k];
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k) sv[j][k] += cv[j][k];
  }
  for (auto& r : su)
    for (auto& x : r) x /= static_cast<double>(layers + 1);
  for (auto& r : sv)
    for (auto& x : r) x /= static_cast<double>(layers + 1);
  return {su, sv};
}

// HSIC as the explicit double sum
//   1/(m-1)^2 * sum_{ijkl} Kx_ij H_jk Ky_kl H_li.
inline double brute_hsic(const std::vector<std::vector<double>>& kx, const std::vector<std::vector<double>>& ky) {
  const std::size_t m = kx.size();
  auto h = [&](std::size_t i, std::size_t j) { return (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(m); };
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < m; ++k)
        for (std::size_t l = 0; l < m; ++l) s += kx[i][j] * h(j, k) * ky[k][l] * h(l, i);
  return s / static_cast<double>((m - 1) * (m - 1));
}

inline std::vector<std::vector<double>> brute_rbf(const Tensor<double>& x, double sigma) {
  const std::size_t m = x.rows();
  std::vector<std::vector<double>> k(m, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) d2 += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      k[i][j] = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  return k;
}

inline double brute_median_distance(const Tensor<double>& x) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = i + 1; j < x.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      d.push_back(std::sqrt(s));
    }
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  const double med = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
  return med > 0.0 ? med : 1.0;
}

// Brute-force top-K metrics. Ranks every candidate by a full sort.
struct BruteMetrics {
  double recall = 0.0, ndcg = 0.0;
  std::optional<double> dp, eo;
};

inline double brute_jsd(const std::vector<double>& p, const std::vector<double>& q) {
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2.0;
    if (p[i] > 0) out += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) out += 0.5 * q[i] * std::log(q[i] / m);
  }
  // [0, ln 2] by definition; rounding can land one ulp outside
  return std::clamp(out, 0.0, std::log(2.0));
}

inline BruteMetrics brute_metrics(const std::vector<std::vector<double>>& scores,
                                  const std::vector<std::set<std::uint32_t>>& exclude,
                                  const std::vector<std::set<std::uint32_t>>& relevant,
                                  const std::vector<std::uint32_t>& group, std::size_t k) {
  const std::size_t m = scores.size(), n = scores[0].size();
  BruteMetrics out;
  std::vector<std::vector<double>> exposure(2, std::vector<double>(n, 0.0)), hits(2, std::vector<double>(n, 0.0));
  std::vector<double> gsize(2, 0.0);
  std::size_t evaluated = 0;
  for (std::size_t u = 0; u < m; ++u) {
    if (relevant[u].empty()) continue;
    std::vector<std::uint32_t> cand;
    for (std::uint32_t v = 0; v < n; ++v)
      if (!exclude[u].count(v)) cand.push_back(v);
    std::stable_sort(cand.begin(), cand.end(), [&](auto a, auto b) { return scores[u][a] > scores[u][b]; });
    cand.resize(std::min(k, cand.size()));
    double dcg = 0.0, idcg = 0.0;
    std::size_t h = 0;
    for (std::size_t r = 0; r < cand.size(); ++r)
      if (relevant[u].count(cand[r])) {
        dcg += 1.0 / std::log2(r + 2.0);
        ++h;
      }
    for (std::size_t r = 0; r < std::min(k, relevant[u].size()); ++r) idcg += 1.0 / std::log2(r + 2.0);
    out.recall += static_cast<double>(h) / static_cast<double>(relevant[u].size());
    out.ndcg += dcg / idcg;
    ++evaluated;
    gsize[group[u]] += 1.0;
    for (auto v : cand) {
      exposure[group[u]][v] += 1.0;
      if (relevant[u].count(v)) hits[group[u]][v] += 1.0;
    }
  }
  out.recall /= static_cast<double>(evaluated);
  out.ndcg /= static_cast<double>(evaluated);
  auto divergence = [&](std::vector<std::vector<double>> f) -> std::optional<double> {
    if (gsize[0] == 0 || gsize[1] == 0) return std::nullopt;
    for (int s = 0; s < 2; ++s) {
      double tot = 0.0;
      for (auto& x : f[s]) tot += x / gsize[s];
      if (tot == 0.0) return std::nullopt;
      for (auto& x : f[s]) x = x / gsize[s] / tot;
    }
    return brute_jsd(f[0], f[1]);
  };
  out.dp = divergence(exposure);
  out.eo = divergence(hits);
  return out;
}

// Central difference of `loss` along entry i of p.
inline double central_difference(Parameter<double>& p, std::size_t i,
                                 const std::function<Var<double>(Tape<double>&)>& loss, double h) {
  const double keep = p.value[i];
  p.value[i] = keep + h;
  double up, down;
  {
    Tape<double> t;
    up = loss(t).value().item();
  }
  p.value[i] = keep - h;
  {
    Tape<double> t;
    down = loss(t).value().item();
  }
  p.value[i] = keep;
  return (up - down) / (2.0 * h);
}

// Largest relative error between the gradient of `analytic` and central
// differences of `numeric` (the same function unless given), relative error
// being |a - n| / max(|a|, |n|, floor). Each entry is also differenced with a
// step h/10 and the closer estimate counts: a ReLU or clip kink within h of
// the point makes the wide difference meaningless, the narrow one is not.
inline double gradient_error(const std::vector<Parameter<double>*>& params,
                             const std::function<Var<double>(Tape<double>&)>& analytic, double h = 1e-5,
                             double floor = 1e-4,
                             std::function<Var<double>(Tape<double>&)> numeric = nullptr) {
  if (!numeric) numeric = analytic;
  for (auto* p : params) p->grad = Tensor<double>(p->value.rows(), p->value.cols());
  {
    Tape<double> tape;
    tape.backward(analytic(tape));
  }
  double worst = 0.0;
  for (auto* p : params) {
    const Tensor<double> g = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double err = 1e300;
      for (double step : {h, h / 10.0}) {
        const double n = central_difference(*p, i, numeric, step);
        err = std::min(err, std::abs(g[i] - n) / std::max({std::abs(g[i]), std::abs(n), floor}));
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline TripletBatch random_batch(const InteractionGraph& g, std::size_t size, std::mt19937_64& rng) {
  TripletBatch b;
  std::uniform_int_distribution<std::size_t> pick(0, g.num_edges() - 1);
  std::uniform_int_distribution<std::uint32_t> item(0, static_cast<std::uint32_t>(g.num_items() - 1));
  while (b.triplets.size() < size) {
    const auto& e = g.edges()[pick(rng)];
    if (g.user_degree(e.user) >= g.num_items()) continue;
    std::uint32_t j;
    do j = item(rng);
    while (g.has_edge(e.user, j));
    b.triplets.push_back({e.user, e.item, j});
  }
  return b;
}

}  // namespace testing_support
