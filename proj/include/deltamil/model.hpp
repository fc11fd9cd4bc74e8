// Slide-level model: embedding, optional z-score normalization, the GDN
// block stack, aggregation into a slide vector, and the task heads; plus the
// max/mean/attention baseline aggregators used by the comparison harness.
#pragma once

#include <string>

#include "deltamil/bag.hpp"
#include "deltamil/block.hpp"

namespace deltamil {

enum class Arch { deltamil, abmil, meanpool, maxpool };

std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

struct ModelConfig {
  Task task = Task::classification;
  Arch arch = Arch::deltamil;
  Index feature_dim = 1024;
  Index d = 128;
  Index heads = 4;
  Index head_dim = 32;
  Index layers = 1;
  Index d_ff = 0;  // 0 -> 4*d
  Index chunk_size = 64;
  Index attn_dim = 0;  // aggregator hidden width, 0 -> d
  Index n_classes = 2;
  Index n_bins = 4;
  bool zscore = false;
  bool use_local = true;
  bool use_gated = true;
  bool use_delta = true;
  double dropout = 0.0;

  void validate() const;
  BlockConfig block() const;
  Index head_out() const { return task == Task::classification ? n_classes : n_bins; }
};

struct Model {
  ModelConfig config;
  ParamStore params;
  std::vector<double> surv_bins;  // interior cut points, strictly increasing
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);

struct SlideRepr {
  Tensor vector;                    // [d]
  std::optional<Tensor> attention;  // [N], sums to 1, attention aggregators only
};

struct ForwardOut {
  Var output;     // probabilities [n_classes] or hazards [n_bins]
  Var repr;       // [1 x d]
  Var attention;  // [N]; invalid() for pooling aggregators
  SlideRepr slide;
  std::vector<BlockTrace> traces;
};

ForwardOut full_forward(GradTape& tape, const PatchBag& bag, const ModelConfig& cfg,
                        const BoundParams& params, bool train, std::mt19937_64& rng);

// Convenience: forward on a private tape with no gradients.
ForwardOut forward_eval(GradTape& tape, const Model& model, const PatchBag& bag);

// ---- pieces ----
Tensor zscore_features(const Tensor& x);  // per-dimension over the bag, std floored at 1e-6
Var embed(Var features, Var w_e, Var b_e);

struct AttnAggregate {
  Var vector;     // [1 x d]
  Var attention;  // [N]
};
AttnAggregate aggregate_attention(Var z, Var v, Var u, Var w);

enum class PoolMode { max, mean };
Var aggregate_pool(Var z, PoolMode mode);

Var softmax_row(Var logits);
Var classify(Var repr, Var w, Var b);                 // softmax probabilities
Var cross_entropy(Var probs, Index label);            // -log p_label, floored at 1e-12
Var survival_nll(Var hazards, Index bin, bool event); // discrete-time hazard likelihood
double survival_risk(const Tensor& hazards);          // -sum_b S(b), higher = riskier

// Map an event/censoring time to its bin given interior cut points.
Index time_bin(const std::vector<double>& cuts, double time);
// Quantile cut points from training-fold times; errors if not strictly increasing.
std::vector<double> survival_cuts(std::vector<double> times, Index n_bins);

// Scalar loss for one bag (dispatches on task; requires the matching record).
Var bag_loss(const ForwardOut& fwd, const PatchBag& bag, const ModelConfig& cfg,
             const std::vector<double>& surv_bins);

}  // namespace deltamil
