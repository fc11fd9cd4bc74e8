// Flat key=value run configuration shared by every CLI subcommand.
#pragma once

#include <map>
#include <optional>
#include <string>

#include "deltamil/model.hpp"
#include "deltamil/synth.hpp"
#include "deltamil/train.hpp"

namespace deltamil {

struct RunConfig {
  Task task = Task::classification;
  Arch arch = Arch::deltamil;

  // model geometry
  Index feature_dim = 1024;
  Index d = 128;
  Index heads = 4;
  Index head_dim = 32;
  Index layers = 1;
  Index d_ff = 0;
  Index chunk_size = 64;
  Index attn_dim = 0;
  Index n_classes = 2;
  Index n_bins = 4;
  bool zscore = false;
  bool use_local = true;
  bool use_gated = true;
  bool use_delta = true;

  // optimization; accumulation/dropout default per task when unset
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  std::optional<Index> accumulation;
  std::optional<double> dropout;
  Index patience = 10;
  Index max_epochs = 50;

  // synthesis
  Index n_bags = 200;
  Index patches_per_bag = 256;
  double witness_rate = 0.05;
  double noise_std = 1.0;
  double signal_strength = 3.0;
  Index folds = 5;
  double surv_base_rate = 0.02;
  double surv_kappa = 1.0;
  double surv_censor_rate = 0.004;
  double surv_dispersion = 0.5;
  double surv_burden = 3.0;

  // paths
  std::string manifest;
  std::string out_dir = ".";
  std::string checkpoint;
  std::string bag_path;

  // sweep / heatmap
  std::vector<double> ratios = {0.05, 0.1, 0.25, 0.5, 1.0};
  std::vector<std::string> strategies = {"random_k", "top_k", "bottom_k"};
  Index sweep_seeds = 5;
  std::string heatmap_norm = "percentile";

  std::uint64_t seed = 1;
  int fold = -1;  // -1 = all folds

  void apply(const std::string& key, const std::string& value);
  void validate_model() const;

  ModelConfig model_config() const;
  OptimConfig optim_config() const;
  SynthConfig synth_config() const;
};

// Parses '#'-commented key=value lines and applies them; unknown keys are
// rejected.
RunConfig load_run_config(const std::string& path);

}  // namespace deltamil
