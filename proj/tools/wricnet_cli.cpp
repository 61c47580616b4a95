// wricnet: prepare data, train, evaluate, count parameters, check gradients
// and run ablation sweeps. Exit codes: 0 success, 1 bad input or config,
// 2 failed invariant.

#include "wricnet/config.hpp"
#include "wricnet/dataset.hpp"
#include "wricnet/gradcheck.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

namespace fs = std::filesystem;
using namespace wricnet;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kInvariant = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::vector<std::string> overrides;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  for (const auto& o : g.overrides) apply_override(cfg, o);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void write_run_config(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream os(out / "run_config.ini");
  serialize(os, cfg);
}

std::string with_commas(std::size_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

std::optional<std::set<std::string>> id_filter(const std::string& list) {
  if (list.empty()) return std::nullopt;
  return read_id_list(list);
}

std::vector<TilePair> load_tiles(const RunConfig& cfg, const std::string& list) {
  auto tiles = load_prepared(cfg.prepared_dir, cfg.tiers, id_filter(list));
  if (tiles.empty()) throw std::invalid_argument("no prepared tiles match the configured tiers and split");
  for (const auto& tp : tiles)
    if (!tp.gt.same_dims(cfg.model.input_h, cfg.model.input_w))
      throw std::invalid_argument("tile " + tp.tile_id() + " does not match model.input_size");
  return tiles;
}

TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions o;
  o.epochs = cfg.epochs;
  o.seed = cfg.seed;
  o.loss_weights = cfg.loss_weights;
  o.adam = cfg.adam;
  o.class_weights = cfg.class_weights;
  o.augment = cfg.augment;
  return o;
}

int cmd_prepare(const Globals& g) {
  const RunConfig cfg = resolve(g);
  std::vector<ImageTriple> sources;
  if (cfg.source == "synth") {
    sources = synth_dataset(cfg.synth_pairs, cfg.synth_size, cfg.seed);
  } else {
    sources = load_source_dir(cfg.source);
  }
  const fs::path out = g.out;
  const std::size_t n = write_prepared(sources, cfg.tiers, cfg.tile_size, out,
                                       {{"seed", std::to_string(cfg.seed)}, {"source", cfg.source}});
  write_run_config(cfg, out);
  std::cout << "wrote " << n << " tiles from " << sources.size() << " pairs to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const Globals& g) {
  const RunConfig cfg = resolve(g);
  const auto tiles = load_tiles(cfg, cfg.train_list);
  const fs::path out = g.out;
  write_run_config(cfg, out);
  WRICNet<float> model(cfg.model, cfg.seed);
  TrainOptions opt = train_options(cfg);
  opt.checkpoint_dir = out / "checkpoints";
  opt.loss_log = out / "loss_log.csv";
  const auto t0 = std::chrono::steady_clock::now();
  opt.on_epoch_end = [&](const EpochSummary& s) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << s.epoch + 1 << '/' << cfg.epochs << "  mean loss " << s.mean_total << "  ("
              << static_cast<long>(sec) << " s)" << std::endl;
    return true;
  };
  std::cout << variant_name(cfg.model.variant) << ": " << with_commas(model.parameter_count())
            << " parameters, " << tiles.size() << " tiles" << std::endl;
  const auto res = train(model, tiles, opt);
  std::cout << "best epoch " << res.best_epoch + 1 << " mean loss " << res.best_loss << "; checkpoints in "
            << (out / "checkpoints").string() << '\n';
  return kOk;
}

void write_eval_outputs(const EvalReport& rep, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream csv(out / "eval_tiles.csv");
  write_tile_csv(csv, rep);
  std::ofstream txt(out / "eval_summary.txt");
  write_summary(txt, rep);
}

int cmd_eval(const Globals& g, const std::string& checkpoint) {
  const RunConfig cfg = resolve(g);
  const fs::path stem = checkpoint.empty() ? fs::path(cfg.checkpoint) : fs::path(checkpoint);
  if (!fs::exists(stem.string() + ".manifest")) throw CheckpointError("checkpoint not found: " + stem.string());
  WRICNet<float> model(cfg.model, cfg.seed);
  load_checkpoint(model.parameters(), stem);
  const auto tiles = load_tiles(cfg, cfg.test_list);
  const fs::path out = g.out;
  EvalOptions opt;
  opt.fractions = cfg.fractions;
  if (cfg.write_masks) {
    opt.on_prediction = [&](const TilePair& tp, const Mask& pred) {
      const std::string name = tp.source_id + "_" + std::to_string(tp.tile_row) + "_" +
                               std::to_string(tp.tile_col) + ".png";
      write_label_png(out / "pred" / tier_name(tp.tier) / name, pred);
      write_png(out / "overlay" / tier_name(tp.tier) / name, error_overlay(pred, tp.gt));
    };
  }
  const EvalReport rep = predict_and_evaluate(model_predictor(model), tiles, opt);
  write_eval_outputs(rep, out);
  write_run_config(cfg, out);
  write_summary(std::cout, rep);
  return kOk;
}

int cmd_count_params(const Globals& g) {
  const RunConfig cfg = resolve(g);
  const std::size_t n = count_params(cfg.model);
  std::cout << n << '\n';
  if (cfg.model.width_scale == 1.0) {
    const std::size_t ref = reference_param_count(cfg.model.variant);
    const long long delta = static_cast<long long>(n) - static_cast<long long>(ref);
    std::cout << variant_name(cfg.model.variant) << ": " << with_commas(n) << " vs reference "
              << with_commas(ref) << " (delta " << (delta >= 0 ? "+" : "") << delta << ")\n";
  }
  return kOk;
}

int cmd_gradcheck(const Globals& g) {
  const RunConfig cfg = resolve(g);
  GradcheckOptions opt;
  bool ok = true;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& b : run_gradcheck_suite(cfg.seed, opt)) {
    const double err = b.report.max_rel_err();
    const bool pass = err < opt.tolerance;
    ok = ok && pass;
    std::printf("%-32s max rel err %.3e  (%zu entries, %zu re-estimated)  %s\n", b.block.c_str(), err,
                b.report.checked(), b.report.shifted(), pass ? "PASS" : "FAIL");
  }
  std::printf("%.1f s\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return ok ? kOk : kInvariant;
}

/// Ordering of the ablation rows by parameter count, largest first.
constexpr std::array<Variant, 6> kParamOrdering{
    Variant::no_inception_v2,  Variant::no_rich_scale_block,      Variant::proposed,
    Variant::no_multi_channel, Variant::no_weighted_scale_block, Variant::no_rich_scale_block_v2};

int cmd_ablate(const Globals& g, bool params_only) {
  const RunConfig cfg = resolve(g);
  std::vector<TilePair> train_tiles, test_tiles;
  if (!params_only) {
    train_tiles = load_tiles(cfg, cfg.train_list);
    test_tiles = load_tiles(cfg, cfg.test_list);
  }
  std::map<Variant, std::size_t> counts;
  std::printf("%-26s %12s %12s %10s", "variant", "parameters", "reference", "delta");
  if (!params_only) std::printf(" %8s %8s %8s %8s", "GI MA", "GI FA", "GI F1", "GI IoU");
  std::printf("\n");
  for (Variant v : kAllVariants) {
    ModelConfig mc = cfg.model;
    mc.variant = v;
    const std::size_t n = count_params(mc);
    counts[v] = n;
    const std::size_t ref = reference_param_count(v);
    std::printf("%-26s %12s %12s %+10lld", std::string(variant_name(v)).c_str(), with_commas(n).c_str(),
                with_commas(ref).c_str(), static_cast<long long>(n) - static_cast<long long>(ref));
    if (!params_only) {
      WRICNet<float> model(mc, cfg.seed);
      train(model, train_tiles, train_options(cfg));
      EvalOptions eo;
      eo.fractions = cfg.fractions;
      const auto rep = predict_and_evaluate(model_predictor(model), test_tiles, eo);
      std::vector<TileResult> all = rep.rows;
      const Metrics m = gi(all);
      std::printf(" %8.1f %8.1f %8.1f %8.1f", m.ma * 100, m.fa * 100, m.f1 * 100, m.iou * 100);
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  bool ordered = true;
  std::string chain;
  for (std::size_t i = 0; i < kParamOrdering.size(); ++i) {
    chain += std::string(i ? " > " : "") + std::string(variant_name(kParamOrdering[i]));
    if (i > 0 && !(counts[kParamOrdering[i - 1]] > counts[kParamOrdering[i]])) ordered = false;
  }
  std::printf("ordering %s: %s\n", chain.c_str(), ordered ? "holds" : "VIOLATED");
  if (cfg.model.width_scale != 1.0) std::printf("(reference counts apply to width_scale 1.0)\n");
  return ordered ? kOk : kInvariant;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Change detection with weighted rich-scale networks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed overriding model.seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--set", g.overrides, "Override a setting: section.key=value (repeatable)");

  auto* prepare = app.add_subcommand("prepare", "Build HR/MR/LR tile sets from data.source");
  auto* train_cmd = app.add_subcommand("train", "Train on prepared tiles");
  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on prepared tiles");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint stem (overrides eval.checkpoint)");
  auto* count = app.add_subcommand("count-params", "Print the trainable parameter count");
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check of every block");
  bool params_only = false;
  auto* ablate = app.add_subcommand("ablate", "Parameter counts (and optionally toy runs) for all variants");
  ablate->add_flag("--params-only", params_only, "Only count parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInvalid;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(g);
    if (train_cmd->parsed()) return cmd_train(g);
    if (eval->parsed()) return cmd_eval(g, checkpoint);
    if (count->parsed()) return cmd_count_params(g);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(g);
    if (ablate->parsed()) return cmd_ablate(g, params_only);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  }
  return kInvalid;
}
