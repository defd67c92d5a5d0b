// Command-line front end: pretrain, train, eval, sweep, export, ablate.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fairdda.hpp"

namespace fs = std::filesystem;
using namespace fairdda;

namespace {

struct Common {
  std::string config;
  std::string dataset;
  std::string variant;
  std::string out;
  std::vector<std::string> overrides;
  long long seed = -1;
  long long runs = -1;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file");
  app->add_option("--dataset", c.dataset, "synthetic | movielens | lastfm | cache");
  app->add_option("--variant", c.variant, "full | no_dl | no_ep | no_fm | base");
  app->add_option("--seed", c.seed, "first seed");
  app->add_option("--runs", c.runs, "number of seeds");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--set", c.overrides, "config override key=value (repeatable)");
  app->add_flag("-q,--quiet", c.quiet, "no progress output");
}

RunConfig build_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) load_config_file(c.config, cfg);
  if (!c.dataset.empty()) cfg.set("dataset", c.dataset);
  if (!c.variant.empty()) cfg.set("variant", c.variant);
  if (c.seed >= 0) cfg.set("seed", std::to_string(c.seed));
  if (c.runs >= 0) cfg.set("runs", std::to_string(c.runs));
  if (!c.out.empty()) cfg.set("out", c.out);
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    cfg.set(o.substr(0, eq), o.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

RunHooks hooks(const Common& c) {
  RunHooks h;
  if (!c.quiet) h.log = [](const std::string& m) { std::cerr << m << '\n'; };
  return h;
}

void print_summary(const ExperimentRecord& rec) {
  std::cout << variant_name(rec.variant) << " (" << rec.seeds.size() << " seeds)\n";
  std::cout << std::fixed << std::setprecision(4);
  for (auto k : rec.cutoffs()) {
    std::cout << "  @" << k;
    for (const char* name : kMetricNames) {
      const auto s = rec.stats(k, name);
      std::cout << "  " << name << ' ' << s.mean << " +- " << s.stddev;
    }
    std::cout << '\n';
  }
  std::size_t failed = 0;
  for (const auto& s : rec.seeds)
    if (!s.test) ++failed;
  if (failed) std::cout << "  " << failed << " seed(s) failed, see record\n";
}

int cmd_pretrain(const Common& c) {
  const auto cfg = build_config(c);
  const auto ds = load_dataset(cfg);
  const auto data = prepare<Real>(ds, split_dataset(ds, cfg.split, cfg.split_seed));
  for (auto seed : cfg.seeds()) {
    auto rng = stream_rng(seed, 1);
    const auto art = pretrain(data, pretrain_options(cfg), rng);
    const auto dir = seed_dir(cfg, seed);
    fs::create_directories(dir);
    save_checkpoint((dir / "pretrain.ckpt").string(), to_checkpoint(art));
    art.performance.curve.write_csv(dir / "pretrain_performance.csv");
    art.biased.curve.write_csv(dir / "pretrain_biased.csv");
    const std::size_t ks[] = {10};
    const auto rep = evaluate(art.performance.output.users, art.performance.output.items, data.test, ks);
    std::cout << "seed " << seed << ": performance epoch " << art.performance.best_epoch << ", test NDCG@10 "
              << rep.at.at(10).ndcg << "; biased epoch " << art.biased.best_epoch << ", attribute accuracy "
              << art.biased.best_score << " -> " << (dir / "pretrain.ckpt").string() << '\n';
  }
  return 0;
}

int cmd_train(const Common& c) {
  const auto cfg = build_config(c);
  const auto ds = load_dataset(cfg);
  const auto rec = run_pipeline(cfg, ds, hooks(c));
  const auto path = fs::path(cfg.out) / ("record-" + std::string(variant_name(cfg.variant)) + ".json");
  write_json(path, record_json(rec));
  write_config_file(fs::path(cfg.out) / "config.used", cfg);
  print_summary(rec);
  std::cout << "record: " << path.string() << '\n';
  bool any = false;
  for (const auto& s : rec.seeds) any = any || s.test.has_value();
  return any ? 0 : 1;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  const auto cfg = build_config(c);
  const auto ds = load_dataset(cfg);
  const auto data = prepare<Real>(ds, split_dataset(ds, cfg.split, cfg.split_seed));
  const auto ckpt = load_checkpoint<Real>(checkpoint);
  const std::string prefix = ckpt.contains("debiased.users") ? "debiased" : "performance";
  const auto& users = ckpt.at(prefix + ".users");
  const auto& items = ckpt.at(prefix + ".items");
  if (users.rows() != ds.num_users || items.rows() != ds.num_items)
    throw DataError("checkpoint does not match the dataset (" + std::to_string(users.rows()) + " users, " +
                    std::to_string(items.rows()) + " items)");
  const auto& ctx = split == "validation" ? data.validation : data.test;
  const auto rep = evaluate(users, items, ctx, cfg.ks);
  std::cout << metrics_json(rep).dump(2) << '\n';
  return 0;
}

std::vector<SweepAxis> parse_grid(const std::vector<std::string>& specs) {
  std::vector<SweepAxis> axes;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--grid expects key=v1,v2,..., got '" + s + "'");
    SweepAxis a{s.substr(0, eq), detail::split_list(s.substr(eq + 1))};
    axes.push_back(std::move(a));
  }
  return axes;
}

int cmd_sweep(const Common& c, const std::vector<std::string>& grid) {
  const auto cfg = build_config(c);
  const auto axes = parse_grid(grid);
  const auto ds = load_dataset(cfg);
  const auto points = sweep(cfg, ds, axes, hooks(c));
  write_sweep_csv(fs::path(cfg.out) / "sweep.csv", points);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json e;
    for (const auto& [k, v] : p.settings) e["settings"][k] = v;
    e["record"] = record_json(p.record);
    j.push_back(e);
  }
  write_json(fs::path(cfg.out) / "sweep.json", j);
  for (const auto& p : points) {
    for (const auto& [k, v] : p.settings) std::cout << k << '=' << v << ' ';
    const auto n = p.record.stats(cfg.ks.front(), "ndcg");
    const auto d = p.record.stats(cfg.ks.front(), "dp");
    std::cout << "NDCG@" << cfg.ks.front() << ' ' << n.mean << "  DP@" << cfg.ks.front() << ' ' << d.mean << '\n';
  }
  std::cout << "summary: " << (fs::path(cfg.out) / "sweep.csv").string() << '\n';
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& out) {
  export_embeddings(checkpoint, out);
  std::cout << "wrote users.tsv, items.tsv to " << out << '\n';
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& names) {
  const auto cfg = build_config(c);
  std::vector<Variant> variants;
  for (const auto& n : names) variants.push_back(parse_variant(n));
  if (std::find(variants.begin(), variants.end(), Variant::Full) == variants.end())
    variants.insert(variants.begin(), Variant::Full);
  const auto ds = load_dataset(cfg);
  const auto records = run_variants(cfg, ds, variants, hooks(c));
  write_json(fs::path(cfg.out) / "ablation.json", ablation_json(records, Variant::Full));
  for (const auto& [v, rec] : records) print_summary(rec);
  std::cout << "report: " << (fs::path(cfg.out) / "ablation.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair graph recommendation with dual data augmentation"};
  app.require_subcommand(1);

  Common pre, tr, ev, sw, ab;
  auto* p = app.add_subcommand("pretrain", "train the performance and biased models");
  add_common(p, pre);

  auto* t = app.add_subcommand("train", "pretrain + main training + test evaluation for each seed");
  add_common(t, tr);

  std::string eval_ckpt, eval_split = "test";
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on the configured split");
  add_common(e, ev);
  e->add_option("--checkpoint", eval_ckpt, "model or pretrain checkpoint")->required();
  e->add_option("--split", eval_split, "test | validation")->check(CLI::IsMember({"test", "validation"}));

  std::vector<std::string> grid;
  auto* s = app.add_subcommand("sweep", "grid over loss weights");
  add_common(s, sw);
  s->add_option("--grid", grid, "axis as key=v1,v2,... (repeatable)")->required();

  std::string export_ckpt, export_out;
  auto* x = app.add_subcommand("export", "write embeddings as TSV");
  x->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
  x->add_option("--out", export_out, "output directory")->required();

  std::vector<std::string> variants{"full", "no_dl", "no_ep", "no_fm", "base"};
  auto* a = app.add_subcommand("ablate", "run several variants on shared pretraining");
  add_common(a, ab);
  a->add_option("--variants", variants, "variants to compare")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (p->parsed()) return cmd_pretrain(pre);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev, eval_ckpt, eval_split);
    if (s->parsed()) return cmd_sweep(sw, grid);
    if (x->parsed()) return cmd_export(export_ckpt, export_out);
    if (a->parsed()) return cmd_ablate(ab, variants);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
