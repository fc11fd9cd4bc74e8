#include "deltamil/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace deltamil {

void OptimConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("optim: lr must be non-negative");
  if (accumulation_steps < 1) throw ConfigError("optim: accumulation_steps must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("optim: dropout_rate must lie in [0,1)");
  if (early_stop_patience < 0) throw ConfigError("optim: patience must be >= 0");
  if (max_epochs < 1) throw ConfigError("optim: max_epochs must be >= 1");
}

void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               const OptimConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite())
      throw ValueError("adam_step: non-finite gradient for '" + name + "', step rejected");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ValueError("adam_step: missing gradient for '" + name + "'");
    const Tensor& g = it->second;
    if (!state.m.has(name)) {
      state.m.add(name, Tensor::zeros(p.shape()));
      state.v.add(name, Tensor::zeros(p.shape()));
    }
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    m.array() = cfg.beta1 * m.array() + (1.0 - cfg.beta1) * g.array();
    v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * g.array().square();
    // decoupled decay: applied to the parameter directly
    p.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
    p.array() -= cfg.lr * cfg.weight_decay * p.array();
  }
}

EvalResult evaluate_model(const Model& model, const std::vector<PatchBag>& bags) {
  EvalResult r;
  for (const PatchBag& bag : bags) {
    GradTape tape;
    ForwardOut fwd = forward_eval(tape, model, bag);
    if (model.config.task == Task::classification) {
      Tensor probs = fwd.output.value();
      r.preds.push_back(argmax_lowest(probs));
      r.probs.push_back(std::move(probs));
      if (!bag.label) throw ValueError("evaluate: classification bag without label");
      r.labels.push_back(*bag.label);
    } else {
      if (!bag.survival) throw ValueError("evaluate: survival bag without record");
      r.risks.push_back(survival_risk(fwd.output.value()));
      r.times.push_back(bag.survival->time);
      r.events.push_back(bag.survival->event);
    }
  }
  if (model.config.task == Task::classification) {
    r.acc = accuracy(r.preds, r.labels);
    r.auc = auc_macro_ovr(r.probs, r.labels, model.config.n_classes);
  } else {
    r.cindex = c_index(r.risks, r.times, r.events);
  }
  return r;
}

TrainResult train_model(Model& model, const OptimConfig& opt,
                        const std::vector<PatchBag>& train_bags,
                        const std::vector<PatchBag>& val_bags, std::ostream* log) {
  opt.validate();
  if (train_bags.empty() || val_bags.empty())
    throw ConfigError("train: train and validation folds must be non-empty");
  model.config.dropout = opt.dropout_rate;

  std::mt19937_64 rng(opt.seed ^ 0x7261696eULL);
  AdamState adam;
  TrainResult result;
  ParamStore best_params = model.params;
  double best_val = -std::numeric_limits<double>::infinity();
  Index since_best = 0;

  std::vector<Index> order(train_bags.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);

  for (Index epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::map<std::string, Tensor> grad_acc;
    Index window = 0;

    auto apply_window = [&]() {
      if (window == 0) return;
      // averaged over the accumulation window
      for (auto& [name, g] : grad_acc) g.array() /= static_cast<double>(window);
      adam_step(model.params, grad_acc, adam, opt);
      grad_acc.clear();
      window = 0;
    };

    for (Index idx : order) {
      const PatchBag& bag = train_bags[idx];
      GradTape tape;
      BoundParams bound = bind(tape, model.params, true);
      ForwardOut fwd = full_forward(tape, bag, model.config, bound, /*train=*/true, rng);
      Var loss = bag_loss(fwd, bag, model.config, model.surv_bins);
      const double loss_val = loss.value().value();
      if (!std::isfinite(loss_val))
        throw ValueError("train: divergence, non-finite loss at bag " + std::to_string(idx));
      loss_sum += loss_val;
      tape.backward(loss);
      std::map<std::string, Tensor> grads = collect_grads(bound);
      if (grad_acc.empty()) {
        grad_acc = std::move(grads);
      } else {
        for (auto& [name, g] : grad_acc) g.array() += grads.at(name).array();
      }
      if (++window == opt.accumulation_steps) apply_window();
    }
    apply_window();  // remainder window, averaged over its own size

    EvalResult val = evaluate_model(model, val_bags);
    const double metric = model.config.task == Task::classification ? val.auc : val.cindex;
    const bool improved = metric > best_val;
    // ties keep the latest snapshot; the patience clock needs strict progress
    if (metric >= best_val) {
      best_val = metric;
      best_params = model.params;
      result.best_epoch = epoch;
    }
    if (improved)
      since_best = 0;
    else
      ++since_best;
    EpochLog el;
    el.epoch = epoch;
    el.train_loss = loss_sum / static_cast<double>(train_bags.size());
    el.val_metric = metric;
    el.best = improved;
    result.epochs.push_back(el);
    if (log)
      (*log) << "epoch " << epoch << " train_loss " << el.train_loss << " val " << el.val_metric
             << (improved ? " *" : "") << "\n";
    if (since_best >= opt.early_stop_patience) break;
  }

  model.params = best_params;
  result.best_val = best_val;
  return result;
}

}  // namespace deltamil
