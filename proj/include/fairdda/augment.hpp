#pragma once

// Fairness-aware augmentation: sensitive edge pruning driven by the ranking
// shift between the performance and debiased models, and sensitive feature
// masking driven by a detector over debiased x biased representations.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fairdda/autodiff.hpp"
#include "fairdda/encoder.hpp"
#include "fairdda/graph.hpp"
#include "fairdda/nn.hpp"

namespace fairdda {

// Logit: log(p/(1-p)) with logistic noise, so hard decisions are exact
// Bernoulli(p) draws. Literal: log(p) with a single Gumbel(0,1) draw.
enum class NoiseMode { Logit, Literal };

// Relaxed: soft sample. StraightThrough: binary forward, relaxed gradient.
// Hard: plain Bernoulli(p) without gradient.
enum class SampleMode { Relaxed, StraightThrough, Hard };

inline constexpr double kRetentionFloor = 1e-4;

// ---------------------------------------------------------------------------
// Relative ranks

// Delta r_u(v) = sigma(x_u.x_v) - mean_{j in R_u} sigma(x_u.x_j), one entry per
// graph edge in canonical order.
template <typename T>
std::vector<T> relative_ranks_values(const Tensor<T>& users, const Tensor<T>& items,
                                     const InteractionGraph& g) {
  std::vector<T> out(g.num_edges());
  const auto eu = g.edge_users();
  const auto ev = g.edge_items();
  for (std::uint32_t u = 0; u < g.num_users(); ++u) {
    const auto [first, last] = g.user_edge_range(u);
    if (first == last) continue;
    double mean = 0.0;
    for (std::size_t e = first; e < last; ++e) {
      out[e] = detail::sigmoid<T>(dot<T>(users.row(eu[e]), items.row(ev[e])));
      mean += out[e];
    }
    mean /= static_cast<double>(last - first);
    for (std::size_t e = first; e < last; ++e) out[e] = static_cast<T>(out[e] - mean);
  }
  return out;
}

// Differentiable relative ranks (E x 1).
template <typename T>
Var<T> relative_ranks(Var<T> users, Var<T> items, const InteractionGraph& g) {
  const auto& uv = users.value();
  const auto& iv = items.value();
  if (uv.rows() != g.num_users() || iv.rows() != g.num_items())
    throw ShapeError("relative_ranks: representations do not match the graph");
  auto scores = std::make_shared<std::vector<T>>(g.num_edges());
  const auto eu = g.edge_users();
  const auto ev = g.edge_items();
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    (*scores)[e] = detail::sigmoid<T>(dot<T>(uv.row(eu[e]), iv.row(ev[e])));
  Tensor<T> out(g.num_edges(), 1);
  for (std::uint32_t u = 0; u < g.num_users(); ++u) {
    const auto [first, last] = g.user_edge_range(u);
    if (first == last) continue;
    double mean = 0.0;
    for (std::size_t e = first; e < last; ++e) mean += (*scores)[e];
    mean /= static_cast<double>(last - first);
    for (std::size_t e = first; e < last; ++e) out[e] = static_cast<T>((*scores)[e] - mean);
  }
  return users.tape->record(
      "relative_ranks", std::move(out), {users, items},
      [users, items, &g, scores](const Tensor<T>& grad, Tape<T>& tape) {
        const auto& uv = tape.value(users);
        const auto& iv = tape.value(items);
        const auto eu = g.edge_users();
        const auto ev = g.edge_items();
        const bool gu = tape.requires_grad(users), gi = tape.requires_grad(items);
        for (std::uint32_t u = 0; u < g.num_users(); ++u) {
          const auto [first, last] = g.user_edge_range(u);
          if (first == last) continue;
          T gmean{0};
          for (std::size_t e = first; e < last; ++e) gmean += grad[e];
          gmean /= static_cast<T>(last - first);
          for (std::size_t e = first; e < last; ++e) {
            const T y = (*scores)[e];
            const T ds = (grad[e] - gmean) * y * (T{1} - y);
            if (ds == T{0}) continue;
            if (gu) axpy<T>(ds, iv.row(ev[e]), tape.grad(users).row(eu[e]));
            if (gi) axpy<T>(ds, uv.row(eu[e]), tape.grad(items).row(ev[e]));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Retention probabilities and sampling

// p = exp(dr_d - dr_p), clipped from above at 1. p is the probability that the
// edge is kept.
inline std::vector<double> retention_probs(std::span<const double> dr_debiased,
                                           std::span<const double> dr_performance) {
  if (dr_debiased.size() != dr_performance.size())
    throw ShapeError("retention_probs: relative rank vectors differ in length");
  std::vector<double> p(dr_debiased.size());
  for (std::size_t e = 0; e < p.size(); ++e)
    p[e] = std::min(1.0, std::exp(dr_debiased[e] - dr_performance[e]));
  return p;
}

inline double sample_noise(NoiseMode mode, std::mt19937_64& rng) {
  // Open interval (0, 1) so the logs stay finite.
  std::uniform_real_distribution<double> unif(std::nextafter(0.0, 1.0), 1.0);
  auto gumbel = [&] { return -std::log(-std::log(unif(rng))); };
  if (mode == NoiseMode::Logit) return gumbel() - gumbel();
  return gumbel();
}

inline std::vector<double> sample_noise(std::size_t n, NoiseMode mode, std::mt19937_64& rng) {
  std::vector<double> out(n);
  for (auto& x : out) x = sample_noise(mode, rng);
  return out;
}

namespace detail {

struct RelaxedSample {
  double value;       // B_hat
  double derivative;  // dB_hat / d(log-ratio delta)
};

// Relaxed sample as a function of delta = dr_d - dr_p (so p = min(e^delta, 1)).
inline RelaxedSample relaxed_from_delta(double delta, double noise, double tau, NoiseMode mode) {
  if (mode == NoiseMode::Logit) {
    if (delta >= 0.0) return {1.0, 0.0};
    const double floor = std::log(kRetentionFloor);
    const bool clipped = delta < floor;
    const double d = clipped ? floor : delta;
    const double em1 = std::expm1(d);            // p - 1 < 0
    const double logit = d - std::log(-em1);     // log p - log(1 - p)
    const double z = (logit + noise) / tau;
    const double s = sigmoid(z);
    const double dlogit = clipped ? 0.0 : -1.0 / em1;
    return {s, s * (1.0 - s) / tau * dlogit};
  }
  const double logp = std::min(delta, 0.0);
  const double z = (logp + noise) / tau;
  const double s = sigmoid(z);
  return {s, delta < 0.0 ? s * (1.0 - s) / tau : 0.0};
}

}  // namespace detail

// Relaxed retention sample for a probability p (p = 1 edges are certain in
// logit mode).
inline double relaxed_sample(double p, double noise, double tau, NoiseMode mode) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  if (p <= 0.0) return mode == NoiseMode::Logit ? detail::relaxed_from_delta(std::log(kRetentionFloor), noise, tau, mode).value : 0.0;
  return detail::relaxed_from_delta(std::log(std::min(p, 1.0)), noise, tau, mode).value;
}

inline double hard_threshold(double relaxed) { return std::floor(relaxed + 0.5); }

struct RetentionMatrix {
  std::vector<double> probabilities;
  std::vector<double> relaxed;  // empty in Hard mode
  std::vector<double> hard;
  double tau = 0.2;
  NoiseMode noise_mode = NoiseMode::Logit;
  SampleMode sample_mode = SampleMode::StraightThrough;

  // Per-edge mask weights as used in the forward pass.
  template <typename T>
  std::vector<T> forward_weights() const {
    const auto& src = sample_mode == SampleMode::Relaxed ? relaxed : hard;
    return std::vector<T>(src.begin(), src.end());
  }
};

// Value-level sampling from probabilities.
inline RetentionMatrix sample_mask(std::span<const double> probabilities, double tau,
                                   std::mt19937_64& rng, SampleMode mode,
                                   NoiseMode noise_mode = NoiseMode::Logit) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  RetentionMatrix r;
  r.probabilities.assign(probabilities.begin(), probabilities.end());
  r.tau = tau;
  r.noise_mode = noise_mode;
  r.sample_mode = mode;
  r.hard.resize(probabilities.size());
  if (mode == SampleMode::Hard) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t e = 0; e < probabilities.size(); ++e)
      r.hard[e] = unif(rng) < probabilities[e] ? 1.0 : 0.0;
    return r;
  }
  r.relaxed.resize(probabilities.size());
  for (std::size_t e = 0; e < probabilities.size(); ++e) {
    r.relaxed[e] = relaxed_sample(probabilities[e], sample_noise(noise_mode, rng), tau, noise_mode);
    r.hard[e] = hard_threshold(r.relaxed[e]);
  }
  return r;
}

// Differentiable retention weights from delta = dr_d - dr_p (E x 1) and
// pre-drawn noise. StraightThrough emits binary values while passing the
// relaxed derivative backwards.
template <typename T>
Var<T> sample_retention(Var<T> delta, std::span<const double> noise, double tau,
                        NoiseMode noise_mode, SampleMode mode) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  if (mode == SampleMode::Hard) throw Error("hard sampling has no differentiable form");
  const auto& dv = delta.value();
  if (noise.size() != dv.size()) throw ShapeError("sample_retention: one noise value per edge required");
  auto deriv = std::make_shared<std::vector<T>>(dv.size());
  Tensor<T> out(dv.rows(), dv.cols());
  for (std::size_t e = 0; e < dv.size(); ++e) {
    const auto s = detail::relaxed_from_delta(static_cast<double>(dv[e]), noise[e], tau, noise_mode);
    out[e] = static_cast<T>(mode == SampleMode::StraightThrough ? hard_threshold(s.value) : s.value);
    (*deriv)[e] = static_cast<T>(s.derivative);
  }
  return delta.tape->record("sample_retention", std::move(out), {delta},
                            [delta, deriv](const Tensor<T>& g, Tape<T>& tape) {
                              if (!tape.requires_grad(delta)) return;
                              auto& d = tape.grad(delta);
                              for (std::size_t e = 0; e < g.size(); ++e) d[e] += g[e] * (*deriv)[e];
                            });
}

// ---------------------------------------------------------------------------
// Feature masking

// f = exp(-sigmoid(detector(x_d * x_b))), entries in (e^-1, 1).
template <typename T>
Var<T> feature_mask(FeedForwardNet<T>& detector, Var<T> debiased, Var<T> biased) {
  if (!debiased.value().same_shape(biased.value()))
    throw ShapeError("feature_mask: debiased and biased representations differ in shape");
  return exp(neg(sigmoid(detector(*debiased.tape, mul(debiased, biased)))));
}

// X^a = X^d (1 + F)
template <typename T>
Var<T> augment_features(Var<T> layer0, Var<T> mask) {
  return mul(layer0, add_scalar(mask, T{1}));
}

// ---------------------------------------------------------------------------
// Augmented view

struct AugmentOptions {
  bool edge_pruning = true;
  bool feature_masking = true;
  double tau = 0.2;
  NoiseMode noise_mode = NoiseMode::Logit;
  SampleMode sample_mode = SampleMode::StraightThrough;
  std::size_t layers = 3;
};

// Frozen inputs of the augmentation: the graph, cached performance relative
// ranks and the propagated biased representations.
template <typename T>
struct AugmentContext {
  const NormalizedAdjacency<T>* adjacency = nullptr;
  std::vector<T> performance_ranks;  // dr_p per edge
  Tensor<T> biased_users;
  Tensor<T> biased_items;
};

template <typename T>
struct AugmentedView {
  std::optional<Var<T>> delta;    // dr_d - dr_p per edge
  std::optional<Var<T>> weights;  // retention mask per edge
  std::optional<Var<T>> user_mask;
  std::optional<Var<T>> item_mask;
  EncodedVars<T> output;
};

// Builds the augmented graph and representations for one forward pass.
// `noise` holds one draw per edge (ignored when pruning is off).
template <typename T>
AugmentedView<T> build_augmented_view(const AugmentContext<T>& ctx, Var<T> debiased_users0,
                                      Var<T> debiased_items0, const EncodedVars<T>& debiased,
                                      FeedForwardNet<T>& detector, std::span<const double> noise,
                                      const AugmentOptions& opt) {
  Tape<T>& tape = *debiased_users0.tape;
  const auto& g = ctx.adjacency->graph();
  AugmentedView<T> view;
  if (opt.edge_pruning) {
    Var<T> dr_d = relative_ranks(debiased.users, debiased.items, g);
    Var<T> dr_p = tape.constant(Tensor<T>(g.num_edges(), 1, ctx.performance_ranks));
    view.delta = sub(dr_d, dr_p);
    view.weights = sample_retention(*view.delta, noise, opt.tau, opt.noise_mode, opt.sample_mode);
  }
  Var<T> u0 = debiased_users0, v0 = debiased_items0;
  if (opt.feature_masking) {
    view.user_mask = feature_mask(detector, debiased.users, tape.constant(ctx.biased_users));
    view.item_mask = feature_mask(detector, debiased.items, tape.constant(ctx.biased_items));
    u0 = augment_features(u0, *view.user_mask);
    v0 = augment_features(v0, *view.item_mask);
  }
  const Var<T>* w = view.weights ? &*view.weights : nullptr;
  view.output = propagate(ctx.adjacency->view(), u0, v0, opt.layers, w);
  return view;
}

// Audit dump: u, v, dr_p, dr_d, p, B per edge.
inline void dump_retention(const std::string& path, const InteractionGraph& g,
                           std::span<const double> dr_p, std::span<const double> dr_d,
                           const RetentionMatrix& r) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(9);
  out << "user\titem\tdr_p\tdr_d\tp\tB\n";
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    out << g.edges()[e].user << '\t' << g.edges()[e].item << '\t' << dr_p[e] << '\t' << dr_d[e]
        << '\t' << r.probabilities[e] << '\t' << r.hard[e] << '\n';
}

}  // namespace fairdda
