// deltamil command line: dataset synthesis, training, evaluation, ablations,
// retention sweeps, heatmap export, and the gradient self-check.
#include <CLI11.hpp>
#include <iostream>

#include "deltamil/commands.hpp"

using namespace deltamil;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::int64_t> seed;
  std::optional<std::string> out;
  std::optional<int> fold;
  std::optional<std::int64_t> chunk_size;
  std::optional<std::int64_t> layers;
  std::optional<std::int64_t> heads;
  bool no_local = false;
  bool no_gated = false;
  bool no_delta = false;
  bool zscore = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key=value config file");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--fold", f.fold, "restrict to one fold");
  cmd->add_option("--chunk-size", f.chunk_size, "scan chunk size");
  cmd->add_option("--layers", f.layers, "block count");
  cmd->add_option("--heads", f.heads, "attention heads");
  cmd->add_flag("--no-local", f.no_local, "disable the 2D local branch");
  cmd->add_flag("--no-gated", f.no_gated, "disable the retention gate (alpha = 1)");
  cmd->add_flag("--no-delta", f.no_delta, "disable the removal term");
  cmd->add_flag("--zscore", f.zscore, "z-score patch features per bag");
}

RunConfig build_config(const CommonFlags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) rc.seed = static_cast<std::uint64_t>(*f.seed);
  if (f.out) rc.out_dir = *f.out;
  if (f.fold) rc.fold = *f.fold;
  if (f.chunk_size) rc.chunk_size = *f.chunk_size;
  if (f.layers) rc.layers = *f.layers;
  if (f.heads) rc.heads = *f.heads;
  if (f.no_local) rc.use_local = false;
  if (f.no_gated) rc.use_gated = false;
  if (f.no_delta) rc.use_delta = false;
  if (f.zscore) rc.zscore = true;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deltamil: gated delta-rule MIL experiments"};
  app.require_subcommand(1);

  CommonFlags synth_f, train_f, eval_f, ablate_f, sweep_f, heatmap_f, grad_f;
  std::string eval_ckpt, sweep_ckpt, heatmap_ckpt, heatmap_bag, eval_manifest, sweep_manifest;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic bag dataset");
  add_common(synth, synth_f);

  CLI::App* train = app.add_subcommand("train", "train per fold and report mean +/- std");
  add_common(train, train_f);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on test folds");
  add_common(eval, eval_f);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path");
  eval->add_option("--manifest", eval_manifest, "manifest path");

  CLI::App* ablate = app.add_subcommand("ablate", "run the 4-row switch ablation");
  add_common(ablate, ablate_f);

  CLI::App* sweep = app.add_subcommand("sweep", "retention-ratio sweep on a checkpoint");
  add_common(sweep, sweep_f);
  sweep->add_option("--checkpoint", sweep_ckpt, "checkpoint path");
  sweep->add_option("--manifest", sweep_manifest, "manifest path");

  CLI::App* heatmap = app.add_subcommand("heatmap", "export an attention heatmap (P5)");
  add_common(heatmap, heatmap_f);
  heatmap->add_option("--checkpoint", heatmap_ckpt, "checkpoint path");
  heatmap->add_option("--bag", heatmap_bag, "bag file");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference self check");
  add_common(gradcheck, grad_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      cmd_synth(build_config(synth_f));
    } else if (train->parsed()) {
      RunConfig rc = build_config(train_f);
      MetricsReport report = cmd_train(rc);
      std::cout << report_text(report, rc.task);
    } else if (eval->parsed()) {
      RunConfig rc = build_config(eval_f);
      if (!eval_ckpt.empty()) rc.checkpoint = eval_ckpt;
      if (!eval_manifest.empty()) rc.manifest = eval_manifest;
      MetricsReport report = cmd_eval(rc);
      std::cout << report_text(report, load_checkpoint(rc.checkpoint).config.task);
    } else if (ablate->parsed()) {
      RunConfig rc = build_config(ablate_f);
      std::vector<AblationRow> table = cmd_ablate(rc);
      std::cout << "local\tgated\tdelta\t"
                << (rc.task == Task::classification ? "auc\tacc" : "c_index") << "\n";
      for (const AblationRow& r : table) {
        std::cout << r.local << "\t" << r.gated << "\t" << r.delta << "\t";
        if (rc.task == Task::classification)
          std::cout << r.auc << "\t" << r.acc << "\n";
        else
          std::cout << r.cindex << "\n";
      }
    } else if (sweep->parsed()) {
      RunConfig rc = build_config(sweep_f);
      if (!sweep_ckpt.empty()) rc.checkpoint = sweep_ckpt;
      if (!sweep_manifest.empty()) rc.manifest = sweep_manifest;
      cmd_sweep(rc);
    } else if (heatmap->parsed()) {
      RunConfig rc = build_config(heatmap_f);
      if (!heatmap_ckpt.empty()) rc.checkpoint = heatmap_ckpt;
      if (!heatmap_bag.empty()) rc.bag_path = heatmap_bag;
      cmd_heatmap(rc);
    } else if (gradcheck->parsed()) {
      return cmd_gradcheck(build_config(grad_f), std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
