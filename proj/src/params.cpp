#include "deltamil/params.hpp"

#include <cmath>

namespace deltamil {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.emplace(name, std::move(value));
  if (!inserted) throw ValueError("param store: duplicate name '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValueError("param store: unknown name '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValueError("param store: unknown name '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

Index ParamStore::total_size() const {
  Index n = 0;
  for (const auto& [k, v] : params_) n += v.size();
  return n;
}

void ParamStore::set_all_zero() {
  for (auto& [k, v] : params_) v.set_zero();
}

Var BoundParams::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValueError("bound params: unknown name '" + name + "'");
  return it->second;
}

BoundParams bind(GradTape& tape, const ParamStore& store, bool requires_grad) {
  BoundParams out;
  for (const auto& [name, value] : store) out.vars.emplace(name, tape.leaf(value, requires_grad));
  return out;
}

std::map<std::string, Tensor> collect_grads(const BoundParams& bound) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : bound.vars) out.emplace(name, var.grad());
  return out;
}

Tensor uniform_init(std::vector<Index> shape, Index fan_in, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
  std::uniform_real_distribution<double> dist(-s, s);
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace deltamil
