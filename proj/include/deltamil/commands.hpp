// Library-level command implementations behind the CLI subcommands. The
// binary in tools/ is a thin flag-parsing wrapper over these.
#pragma once

#include <iosfwd>

#include "deltamil/checkpoint.hpp"
#include "deltamil/runconfig.hpp"
#include "deltamil/saliency.hpp"

namespace deltamil {

// Writes bag files and a manifest with fold assignments under rc.out_dir.
void cmd_synth(const RunConfig& rc);

struct FoldOutcome {
  int fold = 0;
  Model model;
  TrainResult train;
  EvalResult test;
};

struct TrainingRun {
  std::vector<FoldOutcome> folds;
  MetricsReport report;
};

// Loads the manifest, trains the requested fold(s) and evaluates each test
// fold. Reads bag files; writes nothing.
TrainingRun run_training(const RunConfig& rc, std::ostream* log = nullptr);

// Training plus artifacts: per-fold checkpoints, train_log.txt, report.txt.
MetricsReport cmd_train(const RunConfig& rc);

// Evaluates a checkpoint on the manifest's test fold(s).
MetricsReport cmd_eval(const RunConfig& rc);

struct AblationRow {
  bool local = true, gated = true, delta = true;
  double auc = 0.0, acc = 0.0, cindex = 0.0;
};
// The four switch combinations (-local, -gated, -delta, full) on one fold.
std::vector<AblationRow> cmd_ablate(const RunConfig& rc);

void cmd_sweep(const RunConfig& rc);
void cmd_heatmap(const RunConfig& rc);

struct GradCheckGroup {
  std::string name;
  double rel_err = 0.0;
};
struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst = 0.0;
  bool pass = false;
};

// Central-difference check of every parameter group of a model against the
// tape's gradients on one random bag.
GradCheckReport model_gradcheck(const ModelConfig& cfg, Index n_patches, std::uint64_t seed,
                                double h = 1e-5, double tol = 1e-4);

// Runs the reduced-config full-model suite and prints one line per group.
int cmd_gradcheck(const RunConfig& rc, std::ostream& out);

// Deterministic standard-normal bag for checks and tests.
PatchBag random_bag(Index n_patches, Index feature_dim, std::uint64_t seed, int label);

std::string report_text(const MetricsReport& report, Task task);

}  // namespace deltamil
