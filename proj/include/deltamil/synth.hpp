// Planted-witness bag synthesis (huge bags, tiny discriminative fraction),
// the on-disk bag format, and manifest ingestion with fold splits.
#pragma once

#include <random>
#include <string>

#include "deltamil/bag.hpp"

namespace deltamil {

struct SynthConfig {
  Index n_bags = 200;
  Index patches_per_bag = 256;
  Index feature_dim = 64;
  double witness_rate = 0.05;  // p in (0,1)
  Index n_classes = 2;
  double noise_std = 1.0;
  double signal_strength = 3.0;  // L2 norm of each class signal vector
  bool survival_mode = false;
  // Survival-time model: rate = base_rate * exp(kappa * r), r = witnesses/(p*N).
  double surv_base_rate = 0.02;
  double surv_kappa = 1.0;
  double surv_censor_rate = 0.004;
  // Survival bags draw a per-bag tumor-burden multiplier g ~ Gamma(shape =
  // dispersion, mean = burden); the witness rate becomes min(0.9, p*g). The
  // wide spread is what makes ground-truth risk rankable at kappa = 1.
  double surv_dispersion = 0.5;
  double surv_burden = 3.0;
  Index folds = 5;
  std::uint64_t seed = 1;

  void validate() const;
};

// Fixed class signal vectors derived from the config seed (shared by every
// bag of a dataset); index 0 corresponds to class 1.
std::vector<Tensor> make_signals(const SynthConfig& cfg);

// Per-bag RNG stream derived from (seed, bag index).
std::mt19937_64 bag_rng(std::uint64_t seed, Index bag_index);

// Background ~ N(0, noise^2)^c; witnesses = class signal + noise. Class 0
// carries no witnesses. Coords fill a near-square grid row-major.
PatchBag generate_bag(const SynthConfig& cfg, Index class_id, std::mt19937_64& rng);
PatchBag generate_survival_bag(const SynthConfig& cfg, std::mt19937_64& rng);

// ---- bag files ----
// Layout: magic "DMB1", version u32, N u32, c u32, task u8; N coord pairs of
// u32; N*c float32 features (row-major); label u32 or (time f64, event u8);
// witness flag u8 + N mask bytes when present. All little-endian.
void write_bag(const PatchBag& bag, const std::string& path);
PatchBag read_bag(const std::string& path);

// ---- manifests ----
struct ManifestEntry {
  std::string path;
  std::optional<int> label;
  std::optional<Survival> survival;
  int fold = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  int n_folds = 0;
  Task task = Task::classification;
};

// Tab-separated with a header: path label fold | path time event fold.
Manifest load_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

struct FoldSplit {
  std::vector<Index> train, val, test;
};

// Test = fold k, val = fold (k+1) mod K, train = the rest. A single-fold
// manifest falls back to a 60/20/20 split by row order.
FoldSplit fold_split(const Manifest& m, int fold);

}  // namespace deltamil
