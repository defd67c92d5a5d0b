#pragma once

// Main training phase: the debiased model is trained with BPR while the
// augmented view supplies reconstruction, contrastive and HSIC terms. Only the
// debiased layer-0 table and the feature detector are updated.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fairdda/augment.hpp"
#include "fairdda/config.hpp"
#include "fairdda/encoder.hpp"
#include "fairdda/eval.hpp"
#include "fairdda/nn.hpp"
#include "fairdda/objectives.hpp"
#include "fairdda/pretrain.hpp"

namespace fairdda {

struct StepLog {
  std::size_t step = 0;
  LossBreakdown losses;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "step,L_bpr,L_recon,L_cl,L_dl,L_all\n";
  for (const auto& s : log)
    out << s.step << ',' << s.losses.bpr << ',' << s.losses.recon << ',' << s.losses.contrastive << ','
        << s.losses.debias << ',' << s.losses.total << '\n';
}

// What a variant switches on. Disabled parts are not computed at all, so they
// contribute neither loss nor gradient.
struct VariantPlan {
  bool augment = true;
  bool edge_pruning = true;
  bool feature_masking = true;
  // The baseline is plain LightGCN and is selected on utility alone.
  bool utility_selection = false;
  LossWeights weights;
};

inline VariantPlan plan_for(Variant v, const LossWeights& w) {
  VariantPlan p;
  p.weights = w;
  switch (v) {
    case Variant::Full: break;
    case Variant::NoDebias: p.weights.debias = 0.0; break;
    case Variant::NoEdgePruning: p.edge_pruning = false; break;
    case Variant::NoFeatureMasking: p.feature_masking = false; break;
    case Variant::Base:
      p.augment = p.edge_pruning = p.feature_masking = false;
      p.utility_selection = true;
      p.weights = {0.0, 0.0, 0.0};
      break;
  }
  return p;
}

template <typename T>
struct MainResult {
  EmbeddingTable<T> table;
  FeedForwardNet<T> detector;
  EncoderOutput<T> output;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double reference_dp = 0.0;  // validation DP of the pretrained performance model
  double reference_ndcg = 0.0;
  TrainingCurve curve;
  std::vector<StepLog> losses;
};

// Frozen inputs of the main phase derived from the pretrain artifacts.
template <typename T>
struct FrozenReferences {
  AugmentContext<T> augment;
  const PretrainArtifacts<T>* artifacts = nullptr;

  static FrozenReferences make(const PreparedData<T>& data, const PretrainArtifacts<T>& art) {
    FrozenReferences f;
    f.artifacts = &art;
    f.augment.adjacency = data.adjacency.get();
    f.augment.performance_ranks =
        relative_ranks_values(art.performance.output.users, art.performance.output.items, data.graph());
    f.augment.biased_users = art.biased.output.users;
    f.augment.biased_items = art.biased.output.items;
    return f;
  }
};

namespace detail {

template <typename T>
Var<T> batch_contrastive(const EncodedVars<T>& d, const EncodedVars<T>& a, const TripletBatch& batch,
                         T scale_factor) {
  const auto users = batch.distinct_users();
  const auto items = batch.distinct_items();
  EncodedVars<T> db{gather_rows(d.users, users), gather_rows(d.items, items)};
  EncodedVars<T> ab{gather_rows(a.users, users), gather_rows(a.items, items)};
  return contrastive_total(db, ab, scale_factor);
}

struct Selector {
  Selection rule;
  double dp_limit;     // constrained rule
  double ndcg_floor;   // utility-floor rule
  bool have = false;
  bool eligible = false;
  double ndcg = 0.0;
  double dp = std::numeric_limits<double>::infinity();

  // True when (ndcg, dp) replaces the current choice.
  bool offer(double n, std::optional<double> d) {
    const double dv = d.value_or(std::numeric_limits<double>::infinity());
    if (rule == Selection::Utility) {
      if (have && n <= ndcg) return false;
    } else if (rule == Selection::UtilityFloor) {
      const bool ok = n >= ndcg_floor;
      if (have) {
        if (eligible && (!ok || dv > dp || (dv == dp && n <= ndcg))) return false;
        if (!eligible && !ok && n <= ndcg) return false;
      }
      eligible = ok;
    } else {
      const bool ok = dv <= dp_limit;
      if (have) {
        if (eligible && (!ok || n <= ndcg)) return false;
        if (!eligible && !ok && dv >= dp) return false;
      }
      eligible = ok;
    }
    have = true;
    ndcg = n;
    dp = dv;
    return true;
  }
};

}  // namespace detail

struct MainOptions {
  std::size_t dim = 64;
  std::size_t layers = 3;
  std::size_t batch_size = 256;
  AdamOptions adam;
  VariantPlan plan;
  double tau = 0.2;
  NoiseMode noise_mode = NoiseMode::Logit;
  SampleMode sample_mode = SampleMode::StraightThrough;
  BandwidthOptions bandwidth;
  MaskRefresh mask_refresh = MaskRefresh::Step;
  ContrastiveScope contrastive_scope = ContrastiveScope::Full;
  double contrastive_scale = 1.0;
  bool init_from_performance = true;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t eval_k = 10;
  Selection selection = Selection::UtilityFloor;
  double ndcg_tolerance = 0.05;
  double dp_budget = 1.0;

  static MainOptions from(const RunConfig& c) {
    MainOptions o;
    o.dim = c.dim;
    o.layers = c.layers;
    o.batch_size = c.effective_batch_size();
    o.adam.lr = c.lr;
    o.adam.weight_decay = c.weight_decay;
    o.plan = plan_for(c.variant, c.weights);
    o.tau = c.tau;
    o.noise_mode = c.noise_mode;
    o.sample_mode = c.sample_mode;
    o.bandwidth = c.bandwidth;
    o.mask_refresh = c.mask_refresh;
    o.contrastive_scope = c.contrastive_scope;
    o.contrastive_scale = c.contrastive_scale;
    o.init_from_performance = c.init_from_performance;
    o.max_epochs = c.epochs;
    o.patience = c.patience;
    o.selection = c.selection;
    o.dp_budget = c.dp_budget;
    o.ndcg_tolerance = c.ndcg_tolerance;
    return o;
  }
};

// One optimization step's forward pass; returns L_all.
template <typename T>
Var<T> main_objective(Tape<T>& tape, const PreparedData<T>& data, const FrozenReferences<T>& frozen,
                      EmbeddingTable<T>& table, FeedForwardNet<T>& detector, const TripletBatch& batch,
                      std::span<const double> noise, const MainOptions& opt, LossBreakdown* breakdown) {
  const auto adj = data.adjacency->view();
  Var<T> u0 = tape.parameter(table.users);
  Var<T> v0 = tape.parameter(table.items);
  const EncodedVars<T> deb = propagate(adj, u0, v0, opt.layers);
  Var<T> bpr = bpr_loss(deb.users, deb.items, batch);
  if (!opt.plan.augment) return total_loss<T>(bpr, nullptr, nullptr, nullptr, opt.plan.weights, breakdown);

  AugmentOptions ao;
  ao.edge_pruning = opt.plan.edge_pruning;
  ao.feature_masking = opt.plan.feature_masking;
  ao.tau = opt.tau;
  ao.noise_mode = opt.noise_mode;
  ao.sample_mode = opt.sample_mode;
  ao.layers = opt.layers;
  const auto view = build_augmented_view(frozen.augment, u0, v0, deb, detector, noise, ao);

  const auto& w = opt.plan.weights;
  std::optional<Var<T>> recon, cl, dl;
  if (w.recon > 0.0) recon = recon_loss(view.output.users, view.output.items, batch);
  if (w.contrastive > 0.0) {
    const T s = static_cast<T>(opt.contrastive_scale);
    cl = opt.contrastive_scope == ContrastiveScope::Full ? contrastive_total(deb, view.output, s)
                                                         : detail::batch_contrastive(deb, view.output, batch, s);
  }
  if (w.debias > 0.0) {
    const auto users = batch.distinct_users();
    if (users.size() >= 2) dl = debias_loss(view.output.users, frozen.augment.biased_users, users, opt.bandwidth);
  }
  return total_loss<T>(bpr, recon ? &*recon : nullptr, cl ? &*cl : nullptr, dl ? &*dl : nullptr, w, breakdown);
}

template <typename T>
MainResult<T> train_main(const PreparedData<T>& data, const PretrainArtifacts<T>& art, const MainOptions& opt,
                         std::mt19937_64& rng) {
  const Dataset& ds = *data.dataset;
  const FrozenReferences<T> frozen = FrozenReferences<T>::make(data, art);
  const auto adj = data.adjacency->view();
  const std::size_t ks[] = {opt.eval_k};

  MainResult<T> result;
  if (opt.init_from_performance) {
    if (art.performance.table.dim() != opt.dim) throw ConfigError("pretrained dimension differs from dim");
    result.table = EmbeddingTable<T>(Family::Debiased, art.performance.table.users.value,
                                     art.performance.table.items.value);
  } else {
    result.table = EmbeddingTable<T>::random(Family::Debiased, ds.num_users, ds.num_items, opt.dim, rng);
  }
  result.detector = FeedForwardNet<T>::detector(opt.dim, rng);

  const auto ref = evaluate(art.performance.output.users, art.performance.output.items, data.validation, ks);
  result.reference_dp = ref.at.at(opt.eval_k).dp.value_or(std::numeric_limits<double>::infinity());
  result.reference_ndcg = ref.at.at(opt.eval_k).ndcg;
  const detail::Selector fresh{opt.plan.utility_selection ? Selection::Utility : opt.selection, opt.dp_budget * result.reference_dp,
                               (1.0 - opt.ndcg_tolerance) * result.reference_ndcg};
  detail::Selector selector = fresh;

  // Returns (validation NDCG, whether this epoch becomes the selected one).
  auto validate = [&](std::size_t epoch) {
    const auto out = propagate_values<T>(adj, result.table.users.value, result.table.items.value, opt.layers);
    const auto rep = evaluate(out.users, out.items, data.validation, ks).at.at(opt.eval_k);
    const std::string k = std::to_string(opt.eval_k);
    result.curve.add(epoch, "val_ndcg@" + k, rep.ndcg);
    if (rep.dp) result.curve.add(epoch, "val_dp@" + k, *rep.dp);
    return std::pair{rep.ndcg, selector.offer(rep.ndcg, rep.dp)};
  };

  EmbeddingTable<T> best_table = result.table;
  FeedForwardNet<T> best_detector = result.detector;
  // Epoch 0 is the initialization; it is logged but never selected.
  validate(0);
  selector = fresh;
  const TripletSampler sampler(data.split.train, data.train_items, ds.num_items);
  const std::size_t steps = sampler.steps_per_epoch(opt.batch_size);
  const std::size_t edges = data.graph().num_edges();
  const bool pruning = opt.plan.augment && opt.plan.edge_pruning;
  std::vector<double> noise;
  std::size_t since_best = 0, step = 0;

  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    if (pruning && opt.mask_refresh == MaskRefresh::Epoch) noise = sample_noise(edges, opt.noise_mode, rng);
    for (std::size_t s = 0; s < steps; ++s, ++step) {
      const auto batch = sampler.sample(opt.batch_size, rng);
      if (pruning && opt.mask_refresh == MaskRefresh::Step) noise = sample_noise(edges, opt.noise_mode, rng);
      Tape<T> tape;
      LossBreakdown b;
      try {
        Var<T> loss = main_objective(tape, data, frozen, result.table, result.detector, batch, noise, opt, &b);
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("main phase diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ": " + e.what());
      }
      result.losses.push_back({step, b});
      auto params = result.table.parameters();
      for (auto* p : result.detector.parameters()) params.push_back(p);
      adam_step(params, opt.adam);
    }
    result.epochs_run = epoch;
    if (validate(epoch).second) {
      best_table = result.table;
      best_detector = result.detector;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      // Stops once the selection rule has not found a better epoch for a while.
      break;
    }
  }
  result.table = std::move(best_table);
  result.detector = std::move(best_detector);
  result.output = propagate_values(*data.adjacency, result.table, opt.layers);
  return result;
}

}  // namespace fairdda
