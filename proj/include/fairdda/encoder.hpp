#pragma once

// LightGCN encoder: X_U^{l+1} = A X_V^l, X_V^{l+1} = A^T X_U^l, output is the
// mean of layers 0..L.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fairdda/autodiff.hpp"
#include "fairdda/graph.hpp"
#include "fairdda/nn.hpp"

namespace fairdda {

enum class Family { Performance, Biased, Debiased, Augmented };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Performance: return "performance";
    case Family::Biased: return "biased";
    case Family::Debiased: return "debiased";
    case Family::Augmented: return "augmented";
  }
  return "unknown";
}

// Trainable layer-0 representations of one family.
template <typename T>
struct EmbeddingTable {
  Family family = Family::Performance;
  Parameter<T> users;
  Parameter<T> items;

  EmbeddingTable() = default;
  EmbeddingTable(Family f, Tensor<T> u, Tensor<T> v)
      : family(f),
        users(std::string(family_name(f)) + ".users", std::move(u), true),
        items(std::string(family_name(f)) + ".items", std::move(v), true) {}

  static EmbeddingTable random(Family f, std::size_t num_users, std::size_t num_items,
                               std::size_t dim, std::mt19937_64& rng) {
    auto u = xavier_uniform_scaled<T>(num_users, dim, rng);
    auto v = xavier_uniform_scaled<T>(num_items, dim, rng);
    return EmbeddingTable(f, std::move(u), std::move(v));
  }

  std::size_t dim() const { return users.value.cols(); }
  std::vector<Parameter<T>*> parameters() { return {&users, &items}; }
};

template <typename T>
struct EncoderOutput {
  Tensor<T> users;
  Tensor<T> items;
  // Per-layer (users, items), layer 0 first; filled only on request.
  std::vector<std::pair<Tensor<T>, Tensor<T>>> layers;
};

template <typename T>
struct EncodedVars {
  Var<T> users;
  Var<T> items;
};

namespace detail {

template <typename T>
void check_encoder_shapes(const SparseView<T>& adj, const Tensor<T>& u0, const Tensor<T>& v0) {
  if (u0.rows() != adj.rows || v0.rows() != adj.cols)
    throw ShapeError("propagate: tables " + shape_string(u0) + "/" + shape_string(v0) +
                     " do not match adjacency " + shape_string(adj.rows, adj.cols));
  if (u0.cols() != v0.cols()) throw ShapeError("propagate: user and item dims differ");
}

}  // namespace detail

// Differentiable propagation. With edge_weights, entry e of the adjacency is
// scaled by edge_weights[e] (no renormalization).
template <typename T>
EncodedVars<T> propagate(const SparseView<T>& adj, Var<T> users0, Var<T> items0, std::size_t layers,
                         const Var<T>* edge_weights = nullptr) {
  detail::check_encoder_shapes(adj, users0.value(), items0.value());
  Var<T> u = users0, v = items0;
  Var<T> su = users0, sv = items0;
  for (std::size_t l = 0; l < layers; ++l) {
    Var<T> nu = sparse_dense_matmul(adj, v, false, edge_weights);
    Var<T> nv = sparse_dense_matmul(adj, u, true, edge_weights);
    u = nu;
    v = nv;
    su = add(su, u);
    sv = add(sv, v);
  }
  const T inv = T{1} / static_cast<T>(layers + 1);
  if (layers == 0) return {su, sv};
  return {scale(su, inv), scale(sv, inv)};
}

// Value-only propagation for evaluation and frozen representations.
template <typename T>
EncoderOutput<T> propagate_values(const SparseView<T>& adj, const Tensor<T>& users0,
                                  const Tensor<T>& items0, std::size_t layers,
                                  std::span<const T> edge_weights = {}, bool keep_layers = false) {
  detail::check_encoder_shapes(adj, users0, items0);
  if (!edge_weights.empty() && edge_weights.size() != adj.values.size())
    throw ShapeError("propagate: edge weight count does not match adjacency");
  const T* w = edge_weights.empty() ? nullptr : edge_weights.data();
  EncoderOutput<T> out{users0, items0, {}};
  if (keep_layers) out.layers.emplace_back(users0, items0);
  Tensor<T> u = users0, v = items0;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor<T> nu(u.rows(), u.cols()), nv(v.rows(), v.cols());
    detail::spmm_accumulate(adj, w, v, nu, false);
    detail::spmm_accumulate(adj, w, u, nv, true);
    u = std::move(nu);
    v = std::move(nv);
    for (std::size_t i = 0; i < u.size(); ++i) out.users[i] += u[i];
    for (std::size_t i = 0; i < v.size(); ++i) out.items[i] += v[i];
    if (keep_layers) out.layers.emplace_back(u, v);
  }
  if (layers > 0) {
    const T inv = T{1} / static_cast<T>(layers + 1);
    for (auto& x : out.users.values()) x *= inv;
    for (auto& x : out.items.values()) x *= inv;
  }
  return out;
}

template <typename T>
EncoderOutput<T> propagate_values(const NormalizedAdjacency<T>& adj, const EmbeddingTable<T>& table,
                                  std::size_t layers) {
  return propagate_values<T>(adj.view(), table.users.value, table.items.value, layers);
}

}  // namespace fairdda
