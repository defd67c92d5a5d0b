#pragma once

// Bipartite user-item graph and its symmetric degree normalization
// A_hat = D_U^{-1/2} A D_V^{-1/2}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fairdda/autodiff.hpp"
#include "fairdda/data.hpp"
#include "fairdda/errors.hpp"

namespace fairdda {

struct Edge {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  bool operator==(const Edge&) const = default;
  auto operator<=>(const Edge&) const = default;
};

// Edges are kept in canonical (user, item) order; edge e always refers to
// position e of that order, so per-edge vectors are portable between runs.
class InteractionGraph {
 public:
  InteractionGraph() = default;
  InteractionGraph(std::size_t num_users, std::size_t num_items, std::vector<Edge> edges)
      : num_users_(num_users), num_items_(num_items), edges_(std::move(edges)) {
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
    users_.reserve(edges_.size());
    items_.reserve(edges_.size());
    user_offsets_.assign(num_users_ + 1, 0);
    item_offsets_.assign(num_items_ + 1, 0);
    for (const auto& e : edges_) {
      if (e.user >= num_users_ || e.item >= num_items_)
        throw DataError("edge (" + std::to_string(e.user) + ", " + std::to_string(e.item) +
                        ") outside graph of size " + shape_string(num_users_, num_items_));
      users_.push_back(e.user);
      items_.push_back(e.item);
      ++user_offsets_[e.user + 1];
      ++item_offsets_[e.item + 1];
    }
    for (std::size_t u = 0; u < num_users_; ++u) user_offsets_[u + 1] += user_offsets_[u];
    for (std::size_t v = 0; v < num_items_; ++v) item_offsets_[v + 1] += item_offsets_[v];
    // Item-side adjacency: edges sorted by (item, user), stored as edge ids.
    item_edges_.resize(edges_.size());
    std::vector<std::size_t> fill(item_offsets_.begin(), item_offsets_.end() - 1);
    for (std::uint32_t e = 0; e < edges_.size(); ++e) item_edges_[fill[edges_[e].item]++] = e;
  }

  static InteractionGraph from_interactions(std::size_t num_users, std::size_t num_items,
                                            const std::vector<Interaction>& list) {
    std::vector<Edge> edges;
    edges.reserve(list.size());
    for (const auto& it : list) edges.push_back({it.user, it.item});
    return InteractionGraph(num_users, num_items, std::move(edges));
  }

  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  std::span<const std::uint32_t> edge_users() const { return users_; }
  std::span<const std::uint32_t> edge_items() const { return items_; }

  std::size_t user_degree(std::uint32_t u) const { return user_offsets_[u + 1] - user_offsets_[u]; }
  std::size_t item_degree(std::uint32_t v) const { return item_offsets_[v + 1] - item_offsets_[v]; }

  // Edge ids of user u, which are contiguous: [first, last).
  std::pair<std::size_t, std::size_t> user_edge_range(std::uint32_t u) const {
    return {user_offsets_[u], user_offsets_[u + 1]};
  }
  std::span<const std::uint32_t> user_neighbors(std::uint32_t u) const {
    return std::span<const std::uint32_t>(items_).subspan(user_offsets_[u], user_degree(u));
  }
  std::vector<std::uint32_t> item_neighbors(std::uint32_t v) const {
    std::vector<std::uint32_t> out;
    for (std::size_t k = item_offsets_[v]; k < item_offsets_[v + 1]; ++k)
      out.push_back(edges_[item_edges_[k]].user);
    return out;
  }
  std::span<const std::uint32_t> item_edge_ids(std::uint32_t v) const {
    return std::span<const std::uint32_t>(item_edges_).subspan(item_offsets_[v], item_degree(v));
  }

  bool has_edge(std::uint32_t u, std::uint32_t v) const {
    auto n = user_neighbors(u);
    return std::binary_search(n.begin(), n.end(), v);
  }

 private:
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::uint32_t> users_;
  std::vector<std::uint32_t> items_;
  std::vector<std::size_t> user_offsets_;
  std::vector<std::size_t> item_offsets_;
  std::vector<std::uint32_t> item_edges_;
};

template <typename T>
class NormalizedAdjacency {
 public:
  NormalizedAdjacency() = default;

  explicit NormalizedAdjacency(InteractionGraph graph) : graph_(std::move(graph)) {
    if (graph_.num_edges() == 0) throw DataError("cannot normalize an empty graph");
    values_.resize(graph_.num_edges());
    for (std::size_t e = 0; e < graph_.num_edges(); ++e) {
      const auto& edge = graph_.edges()[e];
      const double du = static_cast<double>(graph_.user_degree(edge.user));
      const double dv = static_cast<double>(graph_.item_degree(edge.item));
      values_[e] = static_cast<T>(1.0 / std::sqrt(du * dv));
    }
  }

  const InteractionGraph& graph() const { return graph_; }
  std::size_t num_users() const { return graph_.num_users(); }
  std::size_t num_items() const { return graph_.num_items(); }
  std::size_t num_edges() const { return graph_.num_edges(); }
  std::span<const T> values() const { return values_; }

  // M x N view, entries in canonical edge order.
  SparseView<T> view() const {
    return {graph_.num_users(), graph_.num_items(), graph_.edge_users(), graph_.edge_items(),
            values_};
  }

  Tensor<T> dense() const {
    Tensor<T> d(num_users(), num_items());
    for (std::size_t e = 0; e < num_edges(); ++e)
      d(graph_.edges()[e].user, graph_.edges()[e].item) = values_[e];
    return d;
  }

 private:
  InteractionGraph graph_;
  std::vector<T> values_;
};

// A_hat reweighted per edge. Degrees stay those of the unmasked graph.
template <typename T>
class MaskedAdjacency {
 public:
  MaskedAdjacency(std::shared_ptr<const NormalizedAdjacency<T>> base, std::vector<T> weights)
      : base_(std::move(base)), weights_(std::move(weights)) {
    if (weights_.size() != base_->num_edges())
      throw ShapeError("mask has " + std::to_string(weights_.size()) + " weights for " +
                       std::to_string(base_->num_edges()) + " edges");
    for (T w : weights_)
      if (!(w >= T{0} && w <= T{1})) throw Error("mask weights must lie in [0, 1]");
    effective_.resize(weights_.size());
    for (std::size_t e = 0; e < weights_.size(); ++e) effective_[e] = base_->values()[e] * weights_[e];
  }

  const NormalizedAdjacency<T>& base() const { return *base_; }
  std::span<const T> weights() const { return weights_; }
  std::span<const T> values() const { return effective_; }

  SparseView<T> view() const {
    const auto& g = base_->graph();
    return {g.num_users(), g.num_items(), g.edge_users(), g.edge_items(), effective_};
  }

  Tensor<T> dense() const {
    Tensor<T> d(base_->num_users(), base_->num_items());
    const auto& edges = base_->graph().edges();
    for (std::size_t e = 0; e < edges.size(); ++e) d(edges[e].user, edges[e].item) = effective_[e];
    return d;
  }

 private:
  std::shared_ptr<const NormalizedAdjacency<T>> base_;
  std::vector<T> weights_;
  std::vector<T> effective_;
};

template <typename T>
MaskedAdjacency<T> apply_mask(std::shared_ptr<const NormalizedAdjacency<T>> base,
                              std::vector<T> weights) {
  return MaskedAdjacency<T>(std::move(base), std::move(weights));
}

// Debug dump: one `u<TAB>v<TAB>w` line per edge.
template <typename T>
void dump_edges(const std::string& path, const InteractionGraph& g, std::span<const T> weights) {
  if (weights.size() != g.num_edges()) throw ShapeError("dump_edges: weight count mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(9);
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    out << g.edges()[e].user << '\t' << g.edges()[e].item << '\t' << weights[e] << '\n';
}

}  // namespace fairdda
