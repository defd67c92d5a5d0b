#pragma once

// Pre-training of the two frozen reference models: a performance model trained
// with BPR and a biased model whose representations are trained to predict the
// sensitive attribute.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fairdda/autodiff.hpp"
#include "fairdda/checkpoint.hpp"
#include "fairdda/data.hpp"
#include "fairdda/encoder.hpp"
#include "fairdda/eval.hpp"
#include "fairdda/graph.hpp"
#include "fairdda/nn.hpp"
#include "fairdda/objectives.hpp"

namespace fairdda {

// Everything derived from (dataset, split) that training and evaluation share.
template <typename T>
struct PreparedData {
  const Dataset* dataset = nullptr;
  Split split;
  std::shared_ptr<const NormalizedAdjacency<T>> adjacency;
  std::vector<std::vector<std::uint32_t>> train_items;
  EvalContext validation;  // excludes train, scores against validation items
  EvalContext test;        // excludes train and validation, scores against test items

  const InteractionGraph& graph() const { return adjacency->graph(); }
};

namespace detail {

inline EvalContext make_eval_context(const Dataset& ds,
                                     std::vector<std::vector<std::uint32_t>> exclude,
                                     std::vector<std::vector<std::uint32_t>> relevant) {
  EvalContext ctx;
  for (std::uint32_t u = 0; u < ds.num_users; ++u)
    if (!relevant[u].empty()) ctx.users.push_back(u);
  ctx.exclude = std::move(exclude);
  ctx.relevant = std::move(relevant);
  ctx.attribute = ds.attribute;
  ctx.num_classes = ds.num_classes;
  ctx.num_items = ds.num_items;
  return ctx;
}

}  // namespace detail

template <typename T>
PreparedData<T> prepare(const Dataset& ds, Split split) {
  if (split.train.empty()) throw DataError("training split is empty");
  PreparedData<T> p;
  p.dataset = &ds;
  p.adjacency = std::make_shared<const NormalizedAdjacency<T>>(
      InteractionGraph::from_interactions(ds.num_users, ds.num_items, split.train));
  p.train_items = per_user_items(split.train, ds.num_users);
  auto val = per_user_items(split.validation, ds.num_users);
  auto test = per_user_items(split.test, ds.num_users);
  auto seen = p.train_items;
  for (std::size_t u = 0; u < seen.size(); ++u) {
    seen[u].insert(seen[u].end(), val[u].begin(), val[u].end());
    std::sort(seen[u].begin(), seen[u].end());
  }
  p.validation = detail::make_eval_context(ds, p.train_items, std::move(val));
  p.test = detail::make_eval_context(ds, std::move(seen), std::move(test));
  p.split = std::move(split);
  return p;
}

// Uniform positive edges, one uniform negative each (rejection sampling).
class TripletSampler {
 public:
  TripletSampler(const std::vector<Interaction>& train,
                 const std::vector<std::vector<std::uint32_t>>& user_items, std::size_t num_items)
      : train_(&train), user_items_(&user_items), num_items_(num_items) {
    if (train.empty()) throw Error("cannot sample triplets from an empty training set");
    const bool any = std::any_of(train.begin(), train.end(), [&](const Interaction& it) {
      return user_items[it.user].size() < num_items;
    });
    if (!any) throw Error("every training user has interacted with every item; no negatives exist");
  }

  Triplet draw(std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> pick_edge(0, train_->size() - 1);
    std::uniform_int_distribution<std::uint32_t> pick_item(0, static_cast<std::uint32_t>(num_items_ - 1));
    for (;;) {
      const auto& it = (*train_)[pick_edge(rng)];
      const auto& mine = (*user_items_)[it.user];
      if (mine.size() >= num_items_) continue;  // saturated user: resample
      std::uint32_t j;
      do j = pick_item(rng);
      while (std::binary_search(mine.begin(), mine.end(), j));
      return {it.user, it.item, j};
    }
  }

  TripletBatch sample(std::size_t batch_size, std::mt19937_64& rng) const {
    if (batch_size == 0) throw Error("batch size must be positive");
    TripletBatch b;
    b.triplets.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) b.triplets.push_back(draw(rng));
    return b;
  }

  std::size_t steps_per_epoch(std::size_t batch_size) const {
    return (train_->size() + batch_size - 1) / batch_size;
  }

 private:
  const std::vector<Interaction>* train_;
  const std::vector<std::vector<std::uint32_t>>* user_items_;
  std::size_t num_items_;
};

template <typename T>
TripletBatch sample_triplets(const PreparedData<T>& data, std::size_t batch_size, std::mt19937_64& rng) {
  return TripletSampler(data.split.train, data.train_items, data.dataset->num_items).sample(batch_size, rng);
}

struct CurvePoint {
  std::size_t epoch = 0;
  std::string metric;
  double value = 0.0;
};

struct TrainingCurve {
  std::vector<CurvePoint> points;

  void add(std::size_t epoch, std::string metric, double value) {
    points.push_back({epoch, std::move(metric), value});
  }

  std::vector<double> series(const std::string& metric) const {
    std::vector<double> out;
    for (const auto& p : points)
      if (p.metric == metric) out.push_back(p.value);
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(9);
    out << "epoch,metric,value\n";
    for (const auto& p : points) out << p.epoch << ',' << p.metric << ',' << p.value << '\n';
  }
};

struct PretrainOptions {
  std::size_t dim = 64;
  std::size_t layers = 3;
  std::size_t batch_size = 256;
  AdamOptions adam;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t eval_k = 10;
  // The biased model is trained full batch, one step per epoch.
  AdamOptions biased_adam{.lr = 1e-2};
  std::size_t biased_epochs = 200;
};

template <typename T>
struct TrainedEncoder {
  EmbeddingTable<T> table;
  EncoderOutput<T> output;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  TrainingCurve curve;
};

template <typename T>
struct PretrainArtifacts {
  TrainedEncoder<T> performance;
  TrainedEncoder<T> biased;
  FeedForwardNet<T> classifier;
};

// BPR training of the performance model with early stopping on validation
// NDCG@eval_k. The returned table is the best epoch's.
template <typename T>
TrainedEncoder<T> train_performance(const PreparedData<T>& data, const PretrainOptions& opt,
                                    std::mt19937_64& rng) {
  const Dataset& ds = *data.dataset;
  TrainedEncoder<T> result;
  result.table = EmbeddingTable<T>::random(Family::Performance, ds.num_users, ds.num_items, opt.dim, rng);
  const TripletSampler sampler(data.split.train, data.train_items, ds.num_items);
  const auto adj = data.adjacency->view();
  const std::size_t ks[] = {opt.eval_k};

  auto validate = [&](const EmbeddingTable<T>& t) {
    const auto out = propagate_values<T>(adj, t.users.value, t.items.value, opt.layers);
    return evaluate(out.users, out.items, data.validation, ks).at[opt.eval_k].ndcg;
  };

  EmbeddingTable<T> best = result.table;
  double best_score = validate(result.table);
  result.curve.add(0, "val_ndcg@" + std::to_string(opt.eval_k), best_score);
  std::size_t since_best = 0;
  const std::size_t steps = sampler.steps_per_epoch(opt.batch_size);
  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto batch = sampler.sample(opt.batch_size, rng);
      Tape<T> tape;
      try {
        auto enc = propagate(adj, tape.parameter(result.table.users), tape.parameter(result.table.items),
                             opt.layers);
        auto loss = bpr_loss(enc.users, enc.items, batch);
        loss_sum += loss.value().item();
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("performance model diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      adam_step(result.table.parameters(), opt.adam);
    }
    result.curve.add(epoch, "train_bpr", loss_sum / static_cast<double>(steps));
    const double score = validate(result.table);
    result.curve.add(epoch, "val_ndcg@" + std::to_string(opt.eval_k), score);
    if (score > best_score) {
      best_score = score;
      best = result.table;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  result.table = std::move(best);
  result.best_score = best_score;
  result.output = propagate_values(*data.adjacency, result.table, opt.layers);
  return result;
}

template <typename T>
double attribute_accuracy(const Tensor<T>& logits, const std::vector<std::uint32_t>& attribute) {
  std::size_t correct = 0;
  for (std::size_t u = 0; u < logits.rows(); ++u) {
    const auto row = logits.row(u);
    const auto best = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == attribute[u];
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

// -(1/M) sum_u log softmax(c(x_u))[s_u]
template <typename T>
Var<T> attribute_ce(Var<T> logits, const std::vector<std::uint32_t>& attribute) {
  return neg(mean(pick_columns(log_softmax_rows(logits), attribute)));
}

// Full-batch cross-entropy training of the biased table and the attribute
// classifier; keeps the parameters with the best attribute accuracy.
template <typename T>
PretrainArtifacts<T> train_biased(const PreparedData<T>& data, const PretrainOptions& opt,
                                  std::mt19937_64& rng, TrainedEncoder<T> performance = {}) {
  const Dataset& ds = *data.dataset;
  const auto sizes = ds.group_sizes();
  if (std::count_if(sizes.begin(), sizes.end(), [](std::size_t n) { return n > 0; }) < 2)
    throw DataError("attribute classifier needs at least two populated classes");
  PretrainArtifacts<T> art;
  art.performance = std::move(performance);
  auto& result = art.biased;
  result.table = EmbeddingTable<T>::random(Family::Biased, ds.num_users, ds.num_items, opt.dim, rng);
  art.classifier = FeedForwardNet<T>::classifier(opt.dim, ds.num_classes, rng);
  const auto adj = data.adjacency->view();

  EmbeddingTable<T> best_table = result.table;
  FeedForwardNet<T> best_classifier = art.classifier;
  double best_acc = -1.0;
  for (std::size_t epoch = 1; epoch <= opt.biased_epochs; ++epoch) {
    Tape<T> tape;
    double acc = 0.0;
    try {
      auto enc = propagate(adj, tape.parameter(result.table.users), tape.parameter(result.table.items),
                           opt.layers);
      auto logits = art.classifier(tape, enc.users);
      auto loss = attribute_ce(logits, ds.attribute);
      acc = attribute_accuracy(logits.value(), ds.attribute);
      result.curve.add(epoch, "train_ce", loss.value().item());
      result.curve.add(epoch, "accuracy", acc);
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("biased model diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    // acc belongs to the parameters before this update.
    if (acc > best_acc) {
      best_acc = acc;
      best_table = result.table;
      best_classifier = art.classifier;
      result.best_epoch = epoch - 1;
    }
    auto params = result.table.parameters();
    for (auto* p : art.classifier.parameters()) params.push_back(p);
    adam_step(params, opt.biased_adam);
  }
  result.table = std::move(best_table);
  art.classifier = std::move(best_classifier);
  result.best_score = best_acc;
  result.output = propagate_values(*data.adjacency, result.table, opt.layers);
  return art;
}

template <typename T>
PretrainArtifacts<T> pretrain(const PreparedData<T>& data, const PretrainOptions& opt, std::mt19937_64& rng) {
  auto perf = train_performance(data, opt, rng);
  return train_biased(data, opt, rng, std::move(perf));
}

// ---------------------------------------------------------------------------
// Persistence

template <typename T>
Checkpoint<T> to_checkpoint(const PretrainArtifacts<T>& art) {
  Checkpoint<T> c;
  c.meta["performance.best_epoch"] = std::to_string(art.performance.best_epoch);
  c.meta["biased.best_epoch"] = std::to_string(art.biased.best_epoch);
  c.add("performance.users0", art.performance.table.users.value);
  c.add("performance.items0", art.performance.table.items.value);
  c.add("performance.users", art.performance.output.users);
  c.add("performance.items", art.performance.output.items);
  c.add("biased.users0", art.biased.table.users.value);
  c.add("biased.items0", art.biased.table.items.value);
  c.add("biased.users", art.biased.output.users);
  c.add("biased.items", art.biased.output.items);
  for (const auto* p : art.classifier.parameters()) c.add(p->name, p->value);
  return c;
}

template <typename T>
PretrainArtifacts<T> from_checkpoint(const Checkpoint<T>& c, std::size_t num_classes) {
  PretrainArtifacts<T> art;
  art.performance.table = EmbeddingTable<T>(Family::Performance, c.at("performance.users0"),
                                            c.at("performance.items0"));
  art.performance.output = {c.at("performance.users"), c.at("performance.items"), {}};
  art.biased.table = EmbeddingTable<T>(Family::Biased, c.at("biased.users0"), c.at("biased.items0"));
  art.biased.output = {c.at("biased.users"), c.at("biased.items"), {}};
  if (auto it = c.meta.find("performance.best_epoch"); it != c.meta.end())
    art.performance.best_epoch = std::stoull(it->second);
  if (auto it = c.meta.find("biased.best_epoch"); it != c.meta.end())
    art.biased.best_epoch = std::stoull(it->second);
  std::mt19937_64 unused(0);
  art.classifier = FeedForwardNet<T>::classifier(art.biased.table.dim(), num_classes, unused);
  for (auto* p : art.classifier.parameters()) {
    const auto& v = c.at(p->name);
    if (!v.same_shape(p->value)) throw DataError("classifier tensor " + p->name + " has the wrong shape");
    p->value = v;
  }
  return art;
}

}  // namespace fairdda
