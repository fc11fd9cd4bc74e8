// Optimization loop: Adam with decoupled weight decay, gradient accumulation
// averaged over the window, early stopping on the validation metric, and
// whole-dataset evaluation.
#pragma once

#include <iosfwd>

#include "deltamil/metrics.hpp"
#include "deltamil/model.hpp"

namespace deltamil {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  Index accumulation_steps = 1;
  double dropout_rate = 0.0;
  Index early_stop_patience = 10;
  Index max_epochs = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdamState {
  ParamStore m, v;
  Index t = 0;
};

// One update over every named parameter. Rejects the step (with the offending
// name) when any gradient entry is non-finite.
void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               const OptimConfig& cfg);

struct EvalResult {
  double acc = 0.0;
  double auc = 0.0;
  double cindex = 0.0;
  std::vector<Tensor> probs;        // classification
  std::vector<Index> preds, labels;
  std::vector<double> risks, times; // survival
  std::vector<bool> events;
};

EvalResult evaluate_model(const Model& model, const std::vector<PatchBag>& bags);

struct EpochLog {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  bool best = false;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  Index best_epoch = 0;
  double best_val = 0.0;
};

// Trains in place, iterating bags singly with a seeded shuffle, and restores
// the exact parameters of the best-validation epoch before returning.
// Validation metric: AUC for classification, C-index for survival.
TrainResult train_model(Model& model, const OptimConfig& opt,
                        const std::vector<PatchBag>& train_bags,
                        const std::vector<PatchBag>& val_bags, std::ostream* log = nullptr);

}  // namespace deltamil
