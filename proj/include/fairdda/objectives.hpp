#pragma once

// Loss terms of the main training phase: BPR, graph reconstruction, cosine
// contrastive alignment and HSIC debiasing, plus their weighted sum.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <set>
#include <vector>

#include "fairdda/autodiff.hpp"
#include "fairdda/encoder.hpp"
#include "fairdda/errors.hpp"

namespace fairdda {

struct Triplet {
  std::uint32_t user = 0;
  std::uint32_t positive = 0;
  std::uint32_t negative = 0;
  bool operator==(const Triplet&) const = default;
};

struct TripletBatch {
  std::vector<Triplet> triplets;

  std::size_t size() const { return triplets.size(); }
  bool operator==(const TripletBatch&) const = default;

  // Distinct users in ascending order.
  std::vector<std::uint32_t> distinct_users() const {
    std::set<std::uint32_t> s;
    for (const auto& t : triplets) s.insert(t.user);
    return {s.begin(), s.end()};
  }
  std::vector<std::uint32_t> distinct_items() const {
    std::set<std::uint32_t> s;
    for (const auto& t : triplets) {
      s.insert(t.positive);
      s.insert(t.negative);
    }
    return {s.begin(), s.end()};
  }
};

// -mean ln sigma(x_u.x_v - x_u.x_j)
template <typename T>
Var<T> bpr_loss(Var<T> users, Var<T> items, const TripletBatch& batch) {
  if (batch.triplets.empty()) throw Error("bpr_loss: empty batch");
  std::vector<std::uint32_t> us, ps, ns;
  us.reserve(batch.size());
  ps.reserve(batch.size());
  ns.reserve(batch.size());
  for (const auto& t : batch.triplets) {
    us.push_back(t.user);
    ps.push_back(t.positive);
    ns.push_back(t.negative);
  }
  Var<T> u = gather_rows(users, std::move(us));
  Var<T> gap = sub(rowwise_dot(u, gather_rows(items, std::move(ps))),
                   rowwise_dot(u, gather_rows(items, std::move(ns))));
  return neg(mean(log_sigmoid(gap)));
}

// Reconstruction loss: BPR over the augmented representations, with triplets
// drawn from the original (unpruned) training graph.
template <typename T>
Var<T> recon_loss(Var<T> aug_users, Var<T> aug_items, const TripletBatch& batch) {
  return bpr_loss(aug_users, aug_items, batch);
}

enum class BandwidthPolicy { Median, Fixed };

struct BandwidthOptions {
  BandwidthPolicy policy = BandwidthPolicy::Median;
  double fixed = 1.0;
};

// Median of pairwise Euclidean distances; 1 when all samples coincide.
template <typename T>
double median_bandwidth(const Tensor<T>& x) {
  std::vector<double> d;
  d.reserve(x.rows() * (x.rows() - 1) / 2);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = i + 1; j < x.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = static_cast<double>(x(i, c)) - static_cast<double>(x(j, c));
        s += diff * diff;
      }
      d.push_back(std::sqrt(s));
    }
  if (d.empty()) return 1.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

template <typename T>
double resolve_bandwidth(const Tensor<T>& x, const BandwidthOptions& opt) {
  if (opt.policy == BandwidthPolicy::Fixed) {
    if (!(opt.fixed > 0.0)) throw ConfigError("fixed RBF bandwidth must be positive");
    return opt.fixed;
  }
  return median_bandwidth(x);
}

namespace detail {

// H K H for H = I - 11^T/m, in double.
template <typename T>
std::vector<double> double_center(const Tensor<T>& k) {
  const std::size_t m = k.rows();
  std::vector<double> row(m, 0.0), col(m, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double v = k(i, j);
      row[i] += v;
      col[j] += v;
      all += v;
    }
  const double inv = 1.0 / static_cast<double>(m);
  std::vector<double> c(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      c[i * m + j] = static_cast<double>(k(i, j)) - row[i] * inv - col[j] * inv + all * inv * inv;
  return c;
}

}  // namespace detail

// trace(Kx H Ky H) / (m-1)^2 from two m x m Gram matrices, accumulated in double.
template <typename T>
Var<T> hsic_from_grams(Var<T> kx, Var<T> ky) {
  const auto& a = kx.value();
  const auto& b = ky.value();
  if (a.rows() != a.cols() || !a.same_shape(b))
    throw ShapeError("hsic: Gram matrices must be square and equal in size");
  const std::size_t m = a.rows();
  if (m < 2) throw Error("hsic needs at least two samples");
  const double norm = 1.0 / (static_cast<double>(m - 1) * static_cast<double>(m - 1));
  auto ca = std::make_shared<std::vector<double>>(detail::double_center(a));
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) acc += (*ca)[i * m + j] * static_cast<double>(b(j, i));
  return kx.tape->record(
      "hsic", Tensor<T>::scalar(static_cast<T>(acc * norm)), {kx, ky},
      [kx, ky, ca, norm](const Tensor<T>& g, Tape<T>& tape) {
        const double s = static_cast<double>(g[0]) * norm;
        if (tape.requires_grad(kx)) {
          const auto cb = detail::double_center(tape.value(ky));
          auto& d = tape.grad(kx);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(s * cb[i]);
        }
        if (tape.requires_grad(ky)) {
          auto& d = tape.grad(ky);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(s * (*ca)[i]);
        }
      });
}

// HSIC with RBF kernels. Under the median policy each bandwidth is the median
// pairwise distance of its own sample and is differentiated along with it, so
// the value is invariant to rescaling either argument.
template <typename T>
Var<T> hsic(Var<T> x, Var<T> y, const BandwidthOptions& bw = {}) {
  if (x.rows() != y.rows()) throw ShapeError("hsic: sample counts differ");
  if (x.rows() < 2) throw Error("hsic needs at least two samples");
  if (bw.policy == BandwidthPolicy::Fixed) {
    if (!(bw.fixed > 0.0)) throw ConfigError("fixed RBF bandwidth must be positive");
    return hsic_from_grams(rbf_gram(x, bw.fixed), rbf_gram(y, bw.fixed));
  }
  return hsic_from_grams(rbf_gram(x, median_pairwise_distance(x)), rbf_gram(y, median_pairwise_distance(y)));
}

// HSIC between augmented and (frozen) biased user representations over the
// given user rows.
template <typename T>
Var<T> debias_loss(Var<T> aug_users, const Tensor<T>& biased_users,
                   const std::vector<std::uint32_t>& users, const BandwidthOptions& bw = {}) {
  if (users.size() < 2) throw Error("debias_loss needs at least two distinct users");
  Tape<T>& tape = *aug_users.tape;
  Tensor<T> b(users.size(), biased_users.cols());
  for (std::size_t i = 0; i < users.size(); ++i) {
    auto src = biased_users.row(users.at(i));
    std::copy(src.begin(), src.end(), b.row(i).begin());
  }
  return hsic(gather_rows(aug_users, users), tape.constant(std::move(b)), bw);
}

// Mean over rows u of
//   -log( e^{s(a_u,b_u)} / ((1/M) sum_u' [e^{s(a_u,b_u')} + e^{s(a_u,a_u')}]) )
// with s = scale * cosine similarity. `anchors` plays x^d and `others` x^a in
// L_cl(x^d, x^a); swap the arguments for the reverse direction.
template <typename T>
Var<T> contrastive_pair(Var<T> anchors, Var<T> others, T scale_factor = T{1}) {
  if (!anchors.value().same_shape(others.value()))
    throw ShapeError("contrastive_pair: anchor and positive sets differ in shape");
  const std::size_t m = anchors.rows();
  Var<T> s_ab = scale(cosine_sim_matrix(anchors, others), scale_factor);
  Var<T> s_aa = scale(cosine_sim_matrix(anchors, anchors), scale_factor);
  Var<T> denom = add(row_sum(exp(s_ab)), row_sum(exp(s_aa)));
  Var<T> log_mean = log(scale(denom, T{1} / static_cast<T>(m)));
  return mean(sub(log_mean, diag(s_ab)));
}

// Symmetric user-side plus item-side contrastive loss.
template <typename T>
Var<T> contrastive_total(const EncodedVars<T>& debiased, const EncodedVars<T>& augmented,
                         T scale_factor = T{1}) {
  Var<T> users = add(contrastive_pair(debiased.users, augmented.users, scale_factor),
                     contrastive_pair(augmented.users, debiased.users, scale_factor));
  Var<T> items = add(contrastive_pair(debiased.items, augmented.items, scale_factor),
                     contrastive_pair(augmented.items, debiased.items, scale_factor));
  return add(users, items);
}

struct LossWeights {
  double recon = 1.0;
  double contrastive = 0.1;
  double debias = 30.0;
};

struct LossBreakdown {
  double bpr = 0.0;
  double recon = 0.0;
  double contrastive = 0.0;
  double debias = 0.0;
  LossWeights weights;
  double total = 0.0;

  double recomputed_total() const {
    return bpr + weights.recon * recon + weights.contrastive * contrastive +
           weights.debias * debias;
  }
};

// L_all = L_bpr + l_r L_recon + l_c L_cl + l_d L_dl. Absent terms (nullptr)
// contribute exactly zero.
template <typename T>
Var<T> total_loss(Var<T> bpr, const Var<T>* recon, const Var<T>* contrastive, const Var<T>* debias,
                  const LossWeights& w, LossBreakdown* breakdown = nullptr) {
  if (w.recon < 0.0 || w.contrastive < 0.0 || w.debias < 0.0)
    throw ConfigError("loss weights must be non-negative");
  Var<T> total = bpr;
  LossBreakdown b;
  b.weights = w;
  b.bpr = bpr.value().item();
  auto term = [&](const Var<T>* v, double lambda, double& slot) {
    if (v == nullptr) return;
    slot = v->value().item();
    if (lambda != 0.0) total = add(total, scale(*v, static_cast<T>(lambda)));
  };
  term(recon, w.recon, b.recon);
  term(contrastive, w.contrastive, b.contrastive);
  term(debias, w.debias, b.debias);
  b.total = total.value().item();
  if (breakdown) *breakdown = b;
  return total;
}

}  // namespace fairdda
