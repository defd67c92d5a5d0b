#pragma once

// Run configuration: plain `key = value` files ('#' starts a comment) with
// per-key overrides from the command line.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fairdda/augment.hpp"
#include "fairdda/data.hpp"
#include "fairdda/errors.hpp"
#include "fairdda/objectives.hpp"

namespace fairdda {

enum class Variant { Full, NoDebias, NoEdgePruning, NoFeatureMasking, Base };
enum class MaskRefresh { Step, Epoch };
enum class ContrastiveScope { Full, Batch };
enum class Selection { UtilityFloor, Constrained, Utility };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoDebias: return "no_dl";
    case Variant::NoEdgePruning: return "no_ep";
    case Variant::NoFeatureMasking: return "no_fm";
    case Variant::Base: return "base";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::Full, Variant::NoDebias, Variant::NoEdgePruning, Variant::NoFeatureMasking,
                 Variant::Base})
    if (s == variant_name(v)) return v;
  throw ConfigError("unknown variant '" + s + "' (expected full, no_dl, no_ep, no_fm or base)");
}

struct RunConfig {
  // dataset: synthetic | movielens | lastfm | cache
  std::string dataset = "synthetic";
  std::string data_dir;
  std::string attribute = "gender";  // movielens: gender | occupation
  SyntheticOptions synthetic;
  SplitRatios split;
  std::uint64_t split_seed = 0;

  std::size_t dim = 64;
  std::size_t layers = 3;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t batch_size = 0;  // 0: dataset default

  std::size_t pretrain_epochs = 300;
  std::size_t pretrain_patience = 10;
  double biased_lr = 1e-2;
  std::size_t biased_epochs = 200;

  LossWeights weights;
  double tau = 0.2;
  NoiseMode noise_mode = NoiseMode::Logit;
  SampleMode sample_mode = SampleMode::StraightThrough;
  BandwidthOptions bandwidth;
  MaskRefresh mask_refresh = MaskRefresh::Step;
  ContrastiveScope contrastive_scope = ContrastiveScope::Full;
  double contrastive_scale = 1.0;
  bool init_from_performance = true;

  std::size_t epochs = 300;
  std::size_t patience = 10;
  // utility_floor: lowest validation DP among epochs whose NDCG stays within
  // ndcg_tolerance of the pretrained model; constrained: best NDCG among epochs
  // with DP <= dp_budget x pretrained DP; utility: best NDCG.
  Selection selection = Selection::UtilityFloor;
  double ndcg_tolerance = 0.05;
  double dp_budget = 1.0;
  std::vector<std::size_t> ks{10, 20, 30};

  std::uint64_t seed = 0;
  std::size_t runs = 10;
  Variant variant = Variant::Full;
  std::string out = "runs";

  std::size_t effective_batch_size() const {
    if (batch_size > 0) return batch_size;
    if (dataset == "movielens") return 2048;
    if (dataset == "lastfm") return 4096;
    return 256;
  }

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < runs; ++i) s.push_back(seed + i);
    return s;
  }

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> snapshot() const;
  void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return std::stoull(v);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename E>
E pick(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string names;
  for (const auto& [n, e] : opts) {
    if (v == n) return e;
    names += names.empty() ? n : std::string(", ") + n;
  }
  throw ConfigError(key + ": unknown value '" + v + "' (expected " + names + ")");
}

template <typename E>
const char* name_of(E e, std::initializer_list<std::pair<const char*, E>> opts) {
  for (const auto& [n, x] : opts)
    if (x == e) return n;
  return "?";
}

inline std::string fmt_double(double x) {
  std::ostringstream o;
  o.precision(17);
  o << x;
  return o.str();
}

inline const std::initializer_list<std::pair<const char*, NoiseMode>> kNoiseModes{
    {"logit", NoiseMode::Logit}, {"literal", NoiseMode::Literal}};
inline const std::initializer_list<std::pair<const char*, SampleMode>> kSampleModes{
    {"straight_through", SampleMode::StraightThrough}, {"relaxed", SampleMode::Relaxed}};
inline const std::initializer_list<std::pair<const char*, BandwidthPolicy>> kBandwidth{
    {"median", BandwidthPolicy::Median}, {"fixed", BandwidthPolicy::Fixed}};
inline const std::initializer_list<std::pair<const char*, MaskRefresh>> kRefresh{
    {"step", MaskRefresh::Step}, {"epoch", MaskRefresh::Epoch}};
inline const std::initializer_list<std::pair<const char*, ContrastiveScope>> kScope{
    {"full", ContrastiveScope::Full}, {"batch", ContrastiveScope::Batch}};
inline const std::initializer_list<std::pair<const char*, SyntheticOptions::Mixing>> kMixing{
    {"blended", SyntheticOptions::Mixing::Blended}, {"strict", SyntheticOptions::Mixing::Strict}};
inline const std::initializer_list<std::pair<const char*, Selection>> kSelection{
    {"utility_floor", Selection::UtilityFloor}, {"constrained", Selection::Constrained},
    {"utility", Selection::Utility}};

}  // namespace detail

inline void RunConfig::set(const std::string& key_in, const std::string& value_in) {
  using namespace detail;
  const std::string key = trim(key_in), v = trim(value_in);
  auto num = [&] { return to_double(key, v); };
  auto uint = [&] { return to_uint(key, v); };

  if (key == "dataset") dataset = v;
  else if (key == "data_dir") data_dir = v;
  else if (key == "attribute") attribute = v;
  else if (key == "synthetic.users") synthetic.num_users = uint();
  else if (key == "synthetic.items") synthetic.num_items = uint();
  else if (key == "synthetic.classes") synthetic.num_classes = uint();
  else if (key == "synthetic.bias") synthetic.bias_strength = num();
  else if (key == "synthetic.seed") synthetic.seed = uint();
  else if (key == "synthetic.shared_fraction") synthetic.shared_fraction = num();
  else if (key == "synthetic.min_interactions") synthetic.min_interactions = uint();
  else if (key == "synthetic.max_interactions") synthetic.max_interactions = uint();
  else if (key == "synthetic.topics") synthetic.topics = uint();
  else if (key == "synthetic.taste_strength") synthetic.taste_strength = num();
  else if (key == "synthetic.popularity_exponent") synthetic.popularity_exponent = num();
  else if (key == "synthetic.mixing") synthetic.mixing = pick(key, v, kMixing);
  else if (key == "split_ratios") {
    const auto parts = split_list(v);
    if (parts.size() != 3) throw ConfigError("split_ratios: expected train,validation,test");
    split = {to_double(key, parts[0]), to_double(key, parts[1]), to_double(key, parts[2])};
  } else if (key == "split_seed") split_seed = uint();
  else if (key == "dim") dim = uint();
  else if (key == "layers") layers = uint();
  else if (key == "lr") lr = num();
  else if (key == "weight_decay") weight_decay = num();
  else if (key == "batch_size") batch_size = uint();
  else if (key == "pretrain_epochs") pretrain_epochs = uint();
  else if (key == "pretrain_patience") pretrain_patience = uint();
  else if (key == "biased_lr") biased_lr = num();
  else if (key == "biased_epochs") biased_epochs = uint();
  else if (key == "lambda_r") weights.recon = num();
  else if (key == "lambda_c") weights.contrastive = num();
  else if (key == "lambda_d") weights.debias = num();
  else if (key == "tau") tau = num();
  else if (key == "noise_mode") noise_mode = pick(key, v, kNoiseModes);
  else if (key == "sample_mode") sample_mode = pick(key, v, kSampleModes);
  else if (key == "bandwidth_policy") bandwidth.policy = pick(key, v, kBandwidth);
  else if (key == "bandwidth") bandwidth.fixed = num();
  else if (key == "mask_refresh") mask_refresh = pick(key, v, kRefresh);
  else if (key == "contrastive_scope") contrastive_scope = pick(key, v, kScope);
  else if (key == "contrastive_scale") contrastive_scale = num();
  else if (key == "init") init_from_performance = pick(key, v, {std::pair{"performance", true}, std::pair{"random", false}});
  else if (key == "epochs") epochs = uint();
  else if (key == "patience") patience = uint();
  else if (key == "selection") selection = pick(key, v, kSelection);
  else if (key == "dp_budget") dp_budget = num();
  else if (key == "ndcg_tolerance") ndcg_tolerance = num();
  else if (key == "ks") {
    ks.clear();
    for (const auto& p : split_list(v)) ks.push_back(to_uint(key, p));
  } else if (key == "seed") seed = uint();
  else if (key == "runs") runs = uint();
  else if (key == "variant") variant = parse_variant(v);
  else if (key == "out") out = v;
  else throw ConfigError("unknown configuration key '" + key + "'");
}

inline std::map<std::string, std::string> RunConfig::snapshot() const {
  using namespace detail;
  std::map<std::string, std::string> m;
  m["dataset"] = dataset;
  m["data_dir"] = data_dir;
  m["attribute"] = attribute;
  if (dataset == "synthetic") {
    m["synthetic.users"] = std::to_string(synthetic.num_users);
    m["synthetic.items"] = std::to_string(synthetic.num_items);
    m["synthetic.classes"] = std::to_string(synthetic.num_classes);
    m["synthetic.bias"] = fmt_double(synthetic.bias_strength);
    m["synthetic.seed"] = std::to_string(synthetic.seed);
    m["synthetic.shared_fraction"] = fmt_double(synthetic.shared_fraction);
    m["synthetic.min_interactions"] = std::to_string(synthetic.min_interactions);
    m["synthetic.max_interactions"] = std::to_string(synthetic.max_interactions);
    m["synthetic.topics"] = std::to_string(synthetic.topics);
    m["synthetic.taste_strength"] = fmt_double(synthetic.taste_strength);
    m["synthetic.popularity_exponent"] = fmt_double(synthetic.popularity_exponent);
    m["synthetic.mixing"] = name_of(synthetic.mixing, kMixing);
  }
  m["split_ratios"] = fmt_double(split.train) + "," + fmt_double(split.validation) + "," + fmt_double(split.test);
  m["split_seed"] = std::to_string(split_seed);
  m["dim"] = std::to_string(dim);
  m["layers"] = std::to_string(layers);
  m["lr"] = fmt_double(lr);
  m["weight_decay"] = fmt_double(weight_decay);
  m["batch_size"] = std::to_string(effective_batch_size());
  m["pretrain_epochs"] = std::to_string(pretrain_epochs);
  m["pretrain_patience"] = std::to_string(pretrain_patience);
  m["biased_lr"] = fmt_double(biased_lr);
  m["biased_epochs"] = std::to_string(biased_epochs);
  m["lambda_r"] = fmt_double(weights.recon);
  m["lambda_c"] = fmt_double(weights.contrastive);
  m["lambda_d"] = fmt_double(weights.debias);
  m["tau"] = fmt_double(tau);
  m["noise_mode"] = name_of(noise_mode, kNoiseModes);
  m["sample_mode"] = name_of(sample_mode, kSampleModes);
  m["bandwidth_policy"] = name_of(bandwidth.policy, kBandwidth);
  m["bandwidth"] = fmt_double(bandwidth.fixed);
  m["mask_refresh"] = name_of(mask_refresh, kRefresh);
  m["contrastive_scope"] = name_of(contrastive_scope, kScope);
  m["contrastive_scale"] = fmt_double(contrastive_scale);
  m["init"] = init_from_performance ? "performance" : "random";
  m["epochs"] = std::to_string(epochs);
  m["patience"] = std::to_string(patience);
  m["selection"] = name_of(selection, kSelection);
  m["dp_budget"] = fmt_double(dp_budget);
  m["ndcg_tolerance"] = fmt_double(ndcg_tolerance);
  std::string ks_s;
  for (auto k : ks) ks_s += (ks_s.empty() ? "" : ",") + std::to_string(k);
  m["ks"] = ks_s;
  m["seed"] = std::to_string(seed);
  m["runs"] = std::to_string(runs);
  m["variant"] = variant_name(variant);
  m["out"] = out;
  return m;
}

inline void RunConfig::validate() const {
  auto positive = [](const char* key, double x) {
    if (!(x > 0.0)) throw ConfigError(std::string(key) + " must be positive");
  };
  positive("dim", static_cast<double>(dim));
  positive("lr", lr);
  positive("biased_lr", biased_lr);
  positive("tau", tau);
  positive("runs", static_cast<double>(runs));
  positive("patience", static_cast<double>(patience));
  positive("pretrain_patience", static_cast<double>(pretrain_patience));
  positive("contrastive_scale", contrastive_scale);
  positive("dp_budget", dp_budget);
  if (!(ndcg_tolerance >= 0.0 && ndcg_tolerance < 1.0)) throw ConfigError("ndcg_tolerance must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (weights.recon < 0.0 || weights.contrastive < 0.0 || weights.debias < 0.0)
    throw ConfigError("loss weights must be non-negative");
  if (bandwidth.policy == BandwidthPolicy::Fixed) positive("bandwidth", bandwidth.fixed);
  if (ks.empty()) throw ConfigError("ks must list at least one cutoff");
  for (auto k : ks) positive("ks", static_cast<double>(k));
  if (dataset != "synthetic" && dataset != "movielens" && dataset != "lastfm" && dataset != "cache")
    throw ConfigError("dataset must be synthetic, movielens, lastfm or cache");
  if (dataset != "synthetic" && data_dir.empty()) throw ConfigError("dataset " + dataset + " needs data_dir");
  validate_ratios(split);
}

// Applies `key = value` lines from a file on top of cfg.
inline void load_config_file(const std::filesystem::path& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      cfg.set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void write_config_file(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& [k, v] : cfg.snapshot()) out << k << " = " << v << '\n';
}

// Resolves a data directory against FAIRDDA_DATA_ROOT when it is relative.
inline std::filesystem::path resolve_data_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("FAIRDDA_DATA_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic") return generate_synthetic(cfg.synthetic);
  const auto dir = resolve_data_dir(cfg.data_dir);
  if (cfg.dataset == "movielens") {
    MovieLensOptions o;
    o.attribute = detail::pick("attribute", cfg.attribute,
                               {std::pair{"gender", MovieLensAttribute::Gender},
                                std::pair{"occupation", MovieLensAttribute::Occupation}});
    return load_movielens(dir, o);
  }
  if (cfg.dataset == "lastfm") return load_lastfm(dir);
  if (cfg.dataset == "cache") return load_cache(dir);
  throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

}  // namespace fairdda
