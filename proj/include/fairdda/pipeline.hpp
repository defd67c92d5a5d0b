#pragma once

// Seeded experiment runner: pretrain -> main training -> test evaluation, with
// per-seed records, aggregation, ablations, sweeps and embedding export.

#include <chrono>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <limits>
#include <optional>
#include <sstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fairdda/checkpoint.hpp"
#include "fairdda/config.hpp"
#include "fairdda/data.hpp"
#include "fairdda/eval.hpp"
#include "fairdda/pretrain.hpp"
#include "fairdda/train.hpp"

namespace fairdda {

using Real = float;

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

inline PretrainOptions pretrain_options(const RunConfig& c) {
  PretrainOptions o;
  o.dim = c.dim;
  o.layers = c.layers;
  o.batch_size = c.effective_batch_size();
  o.adam.lr = c.lr;
  o.adam.weight_decay = c.weight_decay;
  o.max_epochs = c.pretrain_epochs;
  o.patience = c.pretrain_patience;
  o.biased_adam.lr = c.biased_lr;
  o.biased_adam.weight_decay = c.weight_decay;
  o.biased_epochs = c.biased_epochs;
  return o;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;
  std::optional<MetricsReport> test;  // empty when the seed failed
  std::string error;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double wall_seconds = 0.0;
  std::string checkpoint;
};

struct ExperimentRecord {
  std::map<std::string, std::string> config;
  Variant variant = Variant::Full;
  std::vector<SeedOutcome> seeds;
  double wall_seconds = 0.0;

  // Values of one metric at cutoff k over successful seeds; degenerate
  // fairness values are skipped.
  std::vector<double> values(std::size_t k, const std::string& metric) const {
    std::vector<double> out;
    for (const auto& s : seeds) {
      if (!s.test) continue;
      const auto it = s.test->at.find(k);
      if (it == s.test->at.end()) continue;
      const auto& m = it->second;
      if (metric == "ndcg") out.push_back(m.ndcg);
      else if (metric == "recall") out.push_back(m.recall);
      else if (metric == "dp" && m.dp) out.push_back(*m.dp);
      else if (metric == "eo" && m.eo) out.push_back(*m.eo);
    }
    return out;
  }

  SampleStats stats(std::size_t k, const std::string& metric) const {
    const auto v = values(k, metric);
    return sample_stats(v);
  }

  std::vector<std::size_t> cutoffs() const {
    std::vector<std::size_t> ks;
    for (const auto& s : seeds)
      if (s.test)
        for (const auto& [k, m] : s.test->at)
          if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
    std::sort(ks.begin(), ks.end());
    return ks;
  }
};

inline const char* kMetricNames[] = {"ndcg", "recall", "dp", "eo"};

// {K: {ndcg, recall, dp, eo}}; degenerate fairness values are null.
inline nlohmann::json metrics_json(const MetricsReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, m] : r.at) {
    nlohmann::json e;
    e["ndcg"] = m.ndcg;
    e["recall"] = m.recall;
    e["dp"] = m.dp ? nlohmann::json(*m.dp) : nlohmann::json(nullptr);
    e["eo"] = m.eo ? nlohmann::json(*m.eo) : nlohmann::json(nullptr);
    j[std::to_string(k)] = e;
  }
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  for (const auto& [k, e] : j.items()) {
    KMetrics m;
    m.ndcg = e.at("ndcg").get<double>();
    m.recall = e.at("recall").get<double>();
    if (!e.at("dp").is_null()) m.dp = e.at("dp").get<double>();
    if (!e.at("eo").is_null()) m.eo = e.at("eo").get<double>();
    r.at[std::stoull(k)] = m;
  }
  return r;
}

inline nlohmann::json aggregate_json(const ExperimentRecord& rec) {
  nlohmann::json agg = nlohmann::json::object();
  for (auto k : rec.cutoffs()) {
    nlohmann::json e;
    for (const char* name : kMetricNames) {
      const auto s = rec.stats(k, name);
      e[name] = {{"mean", s.mean}, {"std", s.stddev}, {"n", s.n}};
    }
    agg[std::to_string(k)] = e;
  }
  return agg;
}

inline nlohmann::json record_json(const ExperimentRecord& rec) {
  nlohmann::json j;
  j["config"] = rec.config;
  j["variant"] = variant_name(rec.variant);
  j["wall_seconds"] = rec.wall_seconds;
  j["seeds"] = nlohmann::json::array();
  for (const auto& s : rec.seeds) {
    nlohmann::json e;
    e["seed"] = s.seed;
    e["best_epoch"] = s.best_epoch;
    e["epochs_run"] = s.epochs_run;
    e["wall_seconds"] = s.wall_seconds;
    e["checkpoint"] = s.checkpoint;
    if (s.test) e["metrics"] = metrics_json(*s.test);
    else e["error"] = s.error;
    j["seeds"].push_back(e);
  }
  j["aggregate"] = aggregate_json(rec);
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints of trained models

template <typename T>
Checkpoint<T> model_checkpoint(const MainResult<T>& r, const Dataset& ds, Variant v, std::uint64_t seed) {
  Checkpoint<T> c;
  c.meta["variant"] = variant_name(v);
  c.meta["seed"] = std::to_string(seed);
  c.meta["best_epoch"] = std::to_string(r.best_epoch);
  c.meta["dataset"] = ds.name;
  c.add("debiased.users0", r.table.users.value);
  c.add("debiased.items0", r.table.items.value);
  c.add("debiased.users", r.output.users);
  c.add("debiased.items", r.output.items);
  for (const auto* p : r.detector.parameters()) c.add(p->name, p->value);
  Tensor<T> groups(ds.num_users, 1);
  for (std::size_t u = 0; u < ds.num_users; ++u) groups[u] = static_cast<T>(ds.attribute[u]);
  c.add("groups", std::move(groups));
  return c;
}

// ---------------------------------------------------------------------------
// Runs

struct RunHooks {
  std::function<void(const std::string&)> log;
};

// Output directory of one seed, or empty when nothing is written.
inline std::filesystem::path seed_dir(const RunConfig& cfg, std::uint64_t seed) {
  if (cfg.out.empty()) return {};
  return std::filesystem::path(cfg.out) / ("seed-" + std::to_string(seed));
}

// Pretrains once for `seed` and trains every requested variant on top of the
// same frozen artifacts. Each variant's main phase uses the same random stream.
inline std::vector<SeedOutcome> run_seed(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed,
                                         const std::vector<Variant>& variants, const RunHooks& hooks = {}) {
  auto log = [&](const std::string& m) {
    if (hooks.log) hooks.log(m);
  };
  std::vector<SeedOutcome> out;
  const auto start = std::chrono::steady_clock::now();
  const auto dir = seed_dir(cfg, seed);
  if (!dir.empty()) std::filesystem::create_directories(dir);

  std::optional<PreparedData<Real>> data;
  std::optional<PretrainArtifacts<Real>> art;
  try {
    data = prepare<Real>(ds, split_dataset(ds, cfg.split, cfg.split_seed));
    auto rng = stream_rng(seed, 1);
    art = pretrain(*data, pretrain_options(cfg), rng);
    log("seed " + std::to_string(seed) + ": pretrained (performance epoch " +
        std::to_string(art->performance.best_epoch) + ", attribute accuracy " +
        std::to_string(art->biased.best_score) + ")");
    if (!dir.empty()) {
      save_checkpoint((dir / "pretrain.ckpt").string(), to_checkpoint(*art));
      art->performance.curve.write_csv(dir / "pretrain_performance.csv");
      art->biased.curve.write_csv(dir / "pretrain_biased.csv");
    }
  } catch (const std::exception& e) {
    for (auto v : variants) {
      SeedOutcome o;
      o.seed = seed;
      o.variant = v;
      o.error = std::string("pretraining failed: ") + e.what();
      out.push_back(o);
    }
    log("seed " + std::to_string(seed) + ": " + out.front().error);
    return out;
  }

  for (auto v : variants) {
    SeedOutcome o;
    o.seed = seed;
    o.variant = v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      RunConfig vc = cfg;
      vc.variant = v;
      auto rng = stream_rng(seed, 2);
      const auto result = train_main(*data, *art, MainOptions::from(vc), rng);
      o.test = evaluate(result.output.users, result.output.items, data->test, cfg.ks);
      o.best_epoch = result.best_epoch;
      o.epochs_run = result.epochs_run;
      if (!dir.empty()) {
        const std::string tag = variant_name(v);
        const auto ckpt = dir / ("model-" + tag + ".ckpt");
        save_checkpoint(ckpt.string(), model_checkpoint(result, ds, v, seed));
        o.checkpoint = ckpt.string();
        write_loss_csv(dir / ("losses-" + tag + ".csv"), result.losses);
        result.curve.write_csv(dir / ("curve-" + tag + ".csv"));
      }
      const auto& m10 = o.test->at.begin()->second;
      log("seed " + std::to_string(seed) + " " + variant_name(v) + ": NDCG@" +
          std::to_string(o.test->at.begin()->first) + " " + std::to_string(m10.ndcg) + ", DP " +
          (m10.dp ? std::to_string(*m10.dp) : std::string("n/a")) + " (epoch " +
          std::to_string(o.best_epoch) + "/" + std::to_string(o.epochs_run) + ")");
    } catch (const std::exception& e) {
      o.error = e.what();
      log("seed " + std::to_string(seed) + " " + variant_name(v) + " failed: " + o.error);
    }
    o.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(o));
  }
  if (out.size() == 1)
    out[0].wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// One record per variant, seeds taken from the config.
inline std::map<Variant, ExperimentRecord> run_variants(const RunConfig& cfg, const Dataset& ds,
                                                        const std::vector<Variant>& variants,
                                                        const RunHooks& hooks = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  std::map<Variant, ExperimentRecord> records;
  for (auto v : variants) {
    RunConfig vc = cfg;
    vc.variant = v;
    records[v].config = vc.snapshot();
    records[v].variant = v;
  }
  for (auto seed : cfg.seeds())
    for (auto& o : run_seed(cfg, ds, seed, variants, hooks)) records[o.variant].seeds.push_back(std::move(o));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (auto& [v, r] : records) r.wall_seconds = wall;
  return records;
}

inline ExperimentRecord run_pipeline(const RunConfig& cfg, const Dataset& ds, const RunHooks& hooks = {}) {
  return std::move(run_variants(cfg, ds, {cfg.variant}, hooks).at(cfg.variant));
}

// Welch p-values of every variant against `reference`, per cutoff and metric.
inline nlohmann::json ablation_json(const std::map<Variant, ExperimentRecord>& records, Variant reference) {
  nlohmann::json j;
  const auto& ref = records.at(reference);
  for (const auto& [v, rec] : records) {
    nlohmann::json e = record_json(rec);
    if (v != reference) {
      nlohmann::json p;
      for (auto k : rec.cutoffs())
        for (const char* name : kMetricNames) {
          const double pv = welch_t_test(ref.values(k, name), rec.values(k, name));
          p[std::to_string(k)][name] = std::isnan(pv) ? nlohmann::json(nullptr) : nlohmann::json(pv);
        }
      e["p_values_vs_" + std::string(variant_name(reference))] = p;
    }
    j[variant_name(v)] = e;
  }
  return j;
}

struct SweepAxis {
  std::string key;  // lambda_r, lambda_c or lambda_d (any config key works)
  std::vector<std::string> values;
};

struct SweepPoint {
  std::vector<std::pair<std::string, std::string>> settings;
  ExperimentRecord record;
};

// Cartesian product over the axes; one pipeline run per point.
inline std::vector<SweepPoint> sweep(const RunConfig& cfg, const Dataset& ds, const std::vector<SweepAxis>& axes,
                                     const RunHooks& hooks = {}) {
  if (axes.empty()) throw ConfigError("sweep grid is empty");
  for (const auto& a : axes)
    if (a.values.empty()) throw ConfigError("sweep axis " + a.key + " has no values");
  std::vector<SweepPoint> points;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    RunConfig pc = cfg;
    SweepPoint p;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      pc.set(axes[a].key, axes[a].values[idx[a]]);
      p.settings.emplace_back(axes[a].key, axes[a].values[idx[a]]);
    }
    if (!cfg.out.empty()) {
      std::string tag;
      for (const auto& [k, v] : p.settings) tag += (tag.empty() ? "" : "_") + k + "-" + v;
      pc.out = (std::filesystem::path(cfg.out) / tag).string();
    }
    p.record = run_pipeline(pc, ds, hooks);
    points.push_back(std::move(p));
    std::size_t a = 0;
    while (a < axes.size() && ++idx[a] == axes[a].values.size()) idx[a++] = 0;
    if (a == axes.size()) break;
  }
  return points;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  if (points.empty()) return;
  for (const auto& [k, v] : points.front().settings) out << k << ',';
  out << "k,ndcg_mean,ndcg_std,recall_mean,recall_std,dp_mean,dp_std,eo_mean,eo_std\n";
  for (const auto& p : points)
    for (auto k : p.record.cutoffs()) {
      for (const auto& [key, v] : p.settings) out << v << ',';
      out << k;
      for (const char* name : kMetricNames) {
        const auto s = p.record.stats(k, name);
        out << ',' << s.mean << ',' << s.stddev;
      }
      out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Embedding export: users.tsv / items.tsv hold `id<TAB>v1..vd`; user_groups.tsv
// holds `id<TAB>group`.

template <typename T>
void write_embedding_tsv(const std::filesystem::path& path, const Tensor<T>& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(std::numeric_limits<T>::max_digits10);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out << r;
    for (T v : m.row(r)) out << '\t' << v;
    out << '\n';
  }
}

template <typename T>
Tensor<T> read_embedding_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  std::vector<T> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id;
    ls >> id;
    if (id != rows) throw DataError(path.string() + ": rows out of order");
    std::size_t c = 0;
    std::string tok;
    while (ls >> tok) {
      if constexpr (std::is_same_v<T, float>) values.push_back(std::stof(tok));
      else values.push_back(static_cast<T>(std::stod(tok)));
      ++c;
    }
    if (rows == 0) cols = c;
    else if (c != cols) throw DataError(path.string() + ": ragged row " + std::to_string(rows));
    ++rows;
  }
  return Tensor<T>(rows, cols, std::move(values));
}

inline void export_embeddings(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir) {
  if (!std::filesystem::exists(checkpoint)) throw DataError("missing checkpoint: " + checkpoint.string());
  const auto c = load_checkpoint<Real>(checkpoint.string());
  std::filesystem::create_directories(out_dir);
  std::string prefix = "debiased";
  if (!c.contains("debiased.users")) prefix = "performance";
  write_embedding_tsv(out_dir / "users.tsv", c.at(prefix + ".users"));
  write_embedding_tsv(out_dir / "items.tsv", c.at(prefix + ".items"));
  if (c.contains("groups")) {
    std::ofstream g(out_dir / "user_groups.tsv");
    const auto& groups = c.at("groups");
    for (std::size_t u = 0; u < groups.rows(); ++u) g << u << '\t' << static_cast<long>(groups[u]) << '\n';
  }
}

}  // namespace fairdda
