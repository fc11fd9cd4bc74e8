#include "deltamil/model.hpp"

#include <algorithm>
#include <cmath>

namespace deltamil {

std::string to_string(Task t) {
  return t == Task::classification ? "classification" : "survival";
}
std::string to_string(Arch a) {
  switch (a) {
    case Arch::deltamil: return "deltamil";
    case Arch::abmil: return "abmil";
    case Arch::meanpool: return "meanpool";
    case Arch::maxpool: return "maxpool";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "survival") return Task::survival;
  throw ConfigError("unknown task '" + s + "' (classification|survival)");
}

Arch arch_from_string(const std::string& s) {
  if (s == "deltamil") return Arch::deltamil;
  if (s == "abmil") return Arch::abmil;
  if (s == "meanpool") return Arch::meanpool;
  if (s == "maxpool") return Arch::maxpool;
  throw ConfigError("unknown arch '" + s + "' (deltamil|abmil|meanpool|maxpool)");
}

void ModelConfig::validate() const {
  if (feature_dim < 1) throw ConfigError("config: feature_dim must be >= 1");
  if (d < 1) throw ConfigError("config: d must be >= 1");
  if (layers < 1) throw ConfigError("config: layers must be >= 1");
  if (arch == Arch::deltamil && heads * head_dim != d)
    throw ConfigError("config: heads*head_dim (" + std::to_string(heads * head_dim) +
                      ") must equal d (" + std::to_string(d) +
                      "); pick d divisible by the head count");
  if (chunk_size < 1) throw ConfigError("config: chunk_size must be >= 1");
  if (task == Task::classification && n_classes < 2)
    throw ConfigError("config: n_classes must be >= 2");
  if (task == Task::survival && n_bins < 2) throw ConfigError("config: n_bins must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must lie in [0,1)");
}

BlockConfig ModelConfig::block() const {
  BlockConfig b;
  b.d = d;
  b.heads = heads;
  b.head_dim = head_dim;
  b.d_ff = d_ff > 0 ? d_ff : 4 * d;
  b.chunk_size = chunk_size;
  b.dropout = dropout;
  b.use_local = use_local;
  b.use_gated = use_gated;
  b.use_delta = use_delta;
  return b;
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  m.params.add("embed.w", uniform_init({cfg.feature_dim, cfg.d}, cfg.feature_dim, rng));
  m.params.add("embed.b", Tensor::zeros({cfg.d}));
  if (cfg.arch == Arch::deltamil) {
    m.params.add("pad_token", Tensor::zeros({cfg.d}));
    BlockConfig bc = cfg.block();
    for (Index l = 0; l < cfg.layers; ++l)
      init_block_params(m.params, "blocks." + std::to_string(l) + ".", bc, rng);
  }
  if (cfg.arch == Arch::deltamil || cfg.arch == Arch::abmil) {
    const Index da = cfg.attn_dim > 0 ? cfg.attn_dim : cfg.d;
    m.params.add("agg.v", uniform_init({cfg.d, da}, cfg.d, rng));
    m.params.add("agg.u", uniform_init({cfg.d, da}, cfg.d, rng));
    // Full-scale scorer init: the softmax starts concentrated, which keeps
    // the patch-retention behavior of the trained model stable (a flat
    // scorer is a degenerate optimum where subset re-prediction breaks).
    m.params.add("agg.w", uniform_init({da, 1}, 16, rng));
  }
  m.params.add("head.w", uniform_init({cfg.d, cfg.head_out()}, cfg.d, rng));
  m.params.add("head.b", Tensor::zeros({cfg.head_out()}));
  return m;
}

Tensor zscore_features(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("zscore: expects rank-2 features");
  const Index n = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  for (Index j = 0; j < c; ++j) {
    double mean = x.mat().col(j).mean();
    double var = 0.0;
    for (Index i = 0; i < n; ++i) {
      double dlt = x.at(i, j) - mean;
      var += dlt * dlt;
    }
    double sd = std::sqrt(var / static_cast<double>(n));
    if (sd < 1e-6) sd = 1e-6;
    for (Index i = 0; i < n; ++i) out.at(i, j) = (x.at(i, j) - mean) / sd;
  }
  return out;
}

Var embed(Var features, Var w_e, Var b_e) {
  return row_broadcast_add(matmul(features, w_e), b_e);
}

AttnAggregate aggregate_attention(Var z, Var v, Var u, Var w) {
  const Index n = z.value().rows();
  Var scores = matmul(mul(tanh(matmul(z, v)), sigmoid(matmul(z, u))), w);  // [N x 1]
  Var attn = softmax_row(reshape(scores, {1, n}));
  AttnAggregate out;
  out.attention = reshape(attn, {n});
  out.vector = matmul(reshape(attn, {1, n}), z);
  return out;
}

Var aggregate_pool(Var z, PoolMode mode) {
  const Index n = z.value().rows(), d = z.value().cols();
  if (mode == PoolMode::max) return reshape(col_max(z), {1, d});
  GradTape& t = *z.tape();
  Var ones = t.constant(Tensor::full({1, n}, 1.0 / static_cast<double>(n)));
  return matmul(ones, z);
}

Var softmax_row(Var logits) {
  // Shift by the max (a constant: it cancels exactly) before exponentiating.
  double m = logits.value().array().maxCoeff();
  Var e = exp(add_scalar(logits, -m));
  return div(e, sum(e));
}

Var classify(Var repr, Var w, Var b) {
  Var logits = row_broadcast_add(matmul(repr, w), b);
  return reshape(softmax_row(logits), {logits.value().size()});
}

Var cross_entropy(Var probs, Index label) {
  if (label < 0 || label >= probs.value().size())
    throw ValueError("cross_entropy: label " + std::to_string(label) + " out of range");
  return neg(log(clamp_min(select(probs, label), 1e-12)));
}

Var survival_nll(Var hazards, Index bin, bool event) {
  const Index nb = hazards.value().size();
  if (bin < 0 || bin >= nb) throw ValueError("survival_nll: bin out of range");
  // death: -log h_bin - sum_{t<bin} log(1-h_t); censored: -sum_{t<=bin} log(1-h_t)
  GradTape& t = *hazards.tape();
  Var loss = t.constant(Tensor::scalar(0.0));
  for (Index b = 0; b < bin; ++b)
    loss = sub(loss, log(rsub_scalar(select(hazards, b), 1.0)));
  if (event)
    loss = sub(loss, log(clamp_min(select(hazards, bin), 1e-300)));
  else
    loss = sub(loss, log(rsub_scalar(select(hazards, bin), 1.0)));
  if (!loss.value().all_finite())
    throw ValueError("survival_nll: non-finite loss (saturated hazards)");
  return loss;
}

double survival_risk(const Tensor& hazards) {
  double surv = 1.0, total = 0.0;
  for (Index b = 0; b < hazards.size(); ++b) {
    surv *= 1.0 - hazards[b];
    total += surv;
  }
  return -total;
}

Index time_bin(const std::vector<double>& cuts, double time) {
  Index bin = 0;
  for (double c : cuts)
    if (time >= c) ++bin;
  return bin;
}

std::vector<double> survival_cuts(std::vector<double> times, Index n_bins) {
  if (times.empty()) throw ValueError("survival_cuts: no times");
  std::sort(times.begin(), times.end());
  std::vector<double> cuts;
  for (Index b = 1; b < n_bins; ++b) {
    double q = static_cast<double>(b) / static_cast<double>(n_bins);
    size_t idx = std::min(times.size() - 1, static_cast<size_t>(q * times.size()));
    cuts.push_back(times[idx]);
  }
  for (size_t i = 1; i < cuts.size(); ++i)
    if (!(cuts[i] > cuts[i - 1]))
      throw ValueError("survival_cuts: bin boundaries not strictly increasing (too many tied "
                       "times in the cohort)");
  return cuts;
}

ForwardOut full_forward(GradTape& tape, const PatchBag& bag, const ModelConfig& cfg,
                        const BoundParams& params, bool train, std::mt19937_64& rng) {
  if (bag.n_patches() < 1) throw ShapeError("forward: bag has no patches");
  if (bag.feature_dim() != cfg.feature_dim)
    throw ShapeError("forward: bag feature dim " + std::to_string(bag.feature_dim()) +
                     " vs config " + std::to_string(cfg.feature_dim));

  Tensor feats = cfg.zscore ? zscore_features(bag.features) : bag.features;
  Var x = tape.constant(std::move(feats));
  Var z = embed(x, params.at("embed.w"), params.at("embed.b"));

  ForwardOut out;
  if (cfg.arch == Arch::deltamil) {
    GridLayout layout = make_grid_layout(normalize_coords(bag.coords));
    z = stack_forward(z, layout, params, params.at("pad_token"), cfg.block(), cfg.layers, train,
                      rng, &out.traces);
  }

  if (cfg.arch == Arch::deltamil || cfg.arch == Arch::abmil) {
    AttnAggregate agg =
        aggregate_attention(z, params.at("agg.v"), params.at("agg.u"), params.at("agg.w"));
    out.repr = agg.vector;
    out.attention = agg.attention;
  } else {
    out.repr = aggregate_pool(z, cfg.arch == Arch::maxpool ? PoolMode::max : PoolMode::mean);
  }

  if (cfg.task == Task::classification) {
    out.output = classify(out.repr, params.at("head.w"), params.at("head.b"));
  } else {
    Var logits = row_broadcast_add(matmul(out.repr, params.at("head.w")), params.at("head.b"));
    out.output = reshape(sigmoid(logits), {cfg.n_bins});
  }

  out.slide.vector = out.repr.value().reshaped({cfg.d});
  if (out.attention.valid()) out.slide.attention = out.attention.value();
  return out;
}

ForwardOut forward_eval(GradTape& tape, const Model& model, const PatchBag& bag) {
  BoundParams bound = bind(tape, model.params, /*requires_grad=*/false);
  std::mt19937_64 rng(0);  // unused: train off
  return full_forward(tape, bag, model.config, bound, /*train=*/false, rng);
}

Var bag_loss(const ForwardOut& fwd, const PatchBag& bag, const ModelConfig& cfg,
             const std::vector<double>& surv_bins) {
  if (cfg.task == Task::classification) {
    if (!bag.label) throw ValueError("loss: classification bag has no label");
    return cross_entropy(fwd.output, *bag.label);
  }
  if (!bag.survival) throw ValueError("loss: survival bag has no survival record");
  Index bin = time_bin(surv_bins, bag.survival->time);
  return survival_nll(fwd.output, bin, bag.survival->event);
}

}  // namespace deltamil
