#pragma once

// Top-K utility metrics (Recall, NDCG) and group fairness metrics (DP, EO)
// measured as Jensen-Shannon divergence between group exposure distributions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "fairdda/errors.hpp"
#include "fairdda/tensor.hpp"

namespace fairdda {

struct TopKTable {
  std::size_t k = 0;
  std::vector<std::uint32_t> users;
  // items[i] belongs to users[i]; best first.
  std::vector<std::vector<std::uint32_t>> items;

  TopKTable truncated(std::size_t new_k) const {
    TopKTable t{std::min(new_k, k), users, items};
    for (auto& l : t.items)
      if (l.size() > new_k) l.resize(new_k);
    return t;
  }
};

// Score x_u . x_v for every item not in exclude[u]; keep the k best, ties by
// ascending item id.
template <typename T>
TopKTable topk(const Tensor<T>& user_emb, const Tensor<T>& item_emb,
               const std::vector<std::vector<std::uint32_t>>& exclude,
               std::span<const std::uint32_t> users, std::size_t k) {
  if (k < 1) throw Error("topk: K must be at least 1");
  if (user_emb.cols() != item_emb.cols()) throw ShapeError("topk: embedding dims differ");
  TopKTable table;
  table.k = k;
  const std::size_t n = item_emb.rows();
  std::vector<T> scores(n);
  std::vector<std::uint8_t> banned(n, 0);
  std::vector<std::uint32_t> cand;
  for (auto u : users) {
    for (std::uint32_t v = 0; v < n; ++v) scores[v] = dot<T>(user_emb.row(u), item_emb.row(v));
    if (u < exclude.size())
      for (auto v : exclude[u]) banned[v] = 1;
    cand.clear();
    for (std::uint32_t v = 0; v < n; ++v)
      if (!banned[v]) cand.push_back(v);
    if (u < exclude.size())
      for (auto v : exclude[u]) banned[v] = 0;
    const std::size_t take = std::min(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                      });
    cand.resize(take);
    table.users.push_back(u);
    table.items.push_back(cand);
  }
  return table;
}

struct UtilityMetrics {
  double recall = 0.0;
  double ndcg = 0.0;
  std::size_t users = 0;
};

// Averages over table users with a nonempty relevant set; others are skipped.
inline UtilityMetrics recall_ndcg(const TopKTable& table,
                                  const std::vector<std::vector<std::uint32_t>>& relevant,
                                  std::size_t k) {
  UtilityMetrics m;
  for (std::size_t i = 0; i < table.users.size(); ++i) {
    const auto u = table.users[i];
    if (u >= relevant.size() || relevant[u].empty()) continue;
    const auto& rel = relevant[u];
    const auto& list = table.items[i];
    const std::size_t upto = std::min(k, list.size());
    double dcg = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < upto; ++r) {
      if (std::find(rel.begin(), rel.end(), list[r]) != rel.end()) {
        dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
        ++hits;
      }
    }
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, rel.size()); ++r)
      idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    m.recall += static_cast<double>(hits) / static_cast<double>(rel.size());
    m.ndcg += dcg / idcg;
    ++m.users;
  }
  if (m.users > 0) {
    m.recall /= static_cast<double>(m.users);
    m.ndcg /= static_cast<double>(m.users);
  }
  return m;
}

// Jensen-Shannon divergence, natural log, 0 log 0 = 0.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("jsd: distributions differ in length");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw Error("jsd: negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw Error("jsd: inputs must each sum to 1");
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) out += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) out += 0.5 * q[i] * std::log(q[i] / m);
  }
  // rounding can step just outside [0, ln 2], e.g. ln 2 + 1ulp for disjoint supports
  return std::clamp(out, 0.0, std::log(2.0));
}

// Per-group item exposure: raw[s][v] = (# users of group s counting v) / |G_s|.
struct GroupExposure {
  std::vector<std::size_t> group_users;
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> normalized;  // empty when the group total is 0
};

namespace detail {

template <typename Counts>
GroupExposure exposure(const TopKTable& table, std::span<const std::uint32_t> attribute,
                       std::size_t num_classes, std::size_t num_items, Counts counts) {
  GroupExposure g;
  g.group_users.assign(num_classes, 0);
  g.raw.assign(num_classes, std::vector<double>(num_items, 0.0));
  for (std::size_t i = 0; i < table.users.size(); ++i) {
    const auto s = attribute[table.users[i]];
    ++g.group_users[s];
    for (auto v : table.items[i])
      if (counts(table.users[i], v)) g.raw[s][v] += 1.0;
  }
  g.normalized.resize(num_classes);
  for (std::size_t s = 0; s < num_classes; ++s) {
    if (g.group_users[s] == 0) continue;
    double total = 0.0;
    for (auto& x : g.raw[s]) {
      x /= static_cast<double>(g.group_users[s]);
      total += x;
    }
    if (total <= 0.0) continue;
    g.normalized[s] = g.raw[s];
    for (auto& x : g.normalized[s]) x /= total;
  }
  return g;
}

// Mean pairwise JSD over groups with evaluated users. Empty when fewer than two
// groups are present or any present group has no mass.
inline std::optional<double> pairwise_jsd(const GroupExposure& g) {
  std::vector<std::size_t> present;
  for (std::size_t s = 0; s < g.group_users.size(); ++s) {
    if (g.group_users[s] == 0) continue;
    if (g.normalized[s].empty()) return std::nullopt;
    present.push_back(s);
  }
  if (present.size() < 2) return std::nullopt;
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < present.size(); ++a)
    for (std::size_t b = a + 1; b < present.size(); ++b) {
      acc += jsd(g.normalized[present[a]], g.normalized[present[b]]);
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

}  // namespace detail

inline GroupExposure dp_exposure(const TopKTable& table, std::span<const std::uint32_t> attribute,
                                 std::size_t num_classes, std::size_t num_items) {
  return detail::exposure(table, attribute, num_classes, num_items,
                          [](std::uint32_t, std::uint32_t) { return true; });
}

inline GroupExposure eo_exposure(const TopKTable& table,
                                 const std::vector<std::vector<std::uint32_t>>& relevant,
                                 std::span<const std::uint32_t> attribute, std::size_t num_classes,
                                 std::size_t num_items) {
  return detail::exposure(table, attribute, num_classes, num_items,
                          [&](std::uint32_t u, std::uint32_t v) {
                            const auto& r = relevant[u];
                            return std::find(r.begin(), r.end(), v) != r.end();
                          });
}

// Demographic parity over top-K exposure. nullopt flags a degenerate case.
inline std::optional<double> dp_at_k(const TopKTable& table, std::span<const std::uint32_t> attribute,
                                     std::size_t num_classes, std::size_t num_items) {
  return detail::pairwise_jsd(dp_exposure(table, attribute, num_classes, num_items));
}

// Equal opportunity over top-K hits against the held-out sets.
inline std::optional<double> eo_at_k(const TopKTable& table,
                                     const std::vector<std::vector<std::uint32_t>>& relevant,
                                     std::span<const std::uint32_t> attribute,
                                     std::size_t num_classes, std::size_t num_items) {
  return detail::pairwise_jsd(eo_exposure(table, relevant, attribute, num_classes, num_items));
}

struct KMetrics {
  double ndcg = 0.0;
  double recall = 0.0;
  std::optional<double> dp;
  std::optional<double> eo;
};

struct MetricsReport {
  std::map<std::size_t, KMetrics> at;
  std::size_t evaluated_users = 0;
};

// Inputs shared by every evaluation of one split.
struct EvalContext {
  std::vector<std::vector<std::uint32_t>> exclude;
  std::vector<std::vector<std::uint32_t>> relevant;
  std::vector<std::uint32_t> users;  // users with nonempty relevant set
  std::vector<std::uint32_t> attribute;
  std::size_t num_classes = 2;
  std::size_t num_items = 0;
};

template <typename T>
MetricsReport evaluate(const Tensor<T>& user_emb, const Tensor<T>& item_emb, const EvalContext& ctx,
                       std::span<const std::size_t> ks) {
  MetricsReport rep;
  if (ks.empty()) return rep;
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  const TopKTable full = topk(user_emb, item_emb, ctx.exclude, ctx.users, kmax);
  rep.evaluated_users = ctx.users.size();
  for (auto k : ks) {
    const TopKTable t = full.truncated(k);
    const auto util = recall_ndcg(t, ctx.relevant, k);
    KMetrics km;
    km.ndcg = util.ndcg;
    km.recall = util.recall;
    km.dp = dp_at_k(t, ctx.attribute, ctx.num_classes, ctx.num_items);
    km.eo = eo_at_k(t, ctx.relevant, ctx.attribute, ctx.num_classes, ctx.num_items);
    rep.at[k] = km;
  }
  return rep;
}

struct SampleStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};

inline SampleStats sample_stats(std::span<const double> xs) {
  SampleStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// Two-sided Welch two-sample t-test p-value. NaN when undefined.
inline double welch_t_test(std::span<const double> a, std::span<const double> b) {
  const auto sa = sample_stats(a), sb = sample_stats(b);
  if (sa.n < 2 || sb.n < 2) return std::nan("");
  const double va = sa.stddev * sa.stddev / static_cast<double>(sa.n);
  const double vb = sb.stddev * sb.stddev / static_cast<double>(sb.n);
  if (va + vb == 0.0) return sa.mean == sb.mean ? 1.0 : 0.0;
  const double t = (sa.mean - sb.mean) / std::sqrt(va + vb);
  const double df = (va + vb) * (va + vb) /
                    (va * va / static_cast<double>(sa.n - 1) + vb * vb / static_cast<double>(sb.n - 1));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace fairdda
