// Named parameter collection with deterministic ordering, plus tape binding.
#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "deltamil/tape.hpp"

namespace deltamil {

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  std::vector<std::string> names() const;  // sorted
  size_t count() const { return params_.size(); }
  Index total_size() const;
  void set_all_zero();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

// Leaves created on a tape for every entry of a store, addressed by name.
struct BoundParams {
  std::map<std::string, Var> vars;
  Var at(const std::string& name) const;
};

BoundParams bind(GradTape& tape, const ParamStore& store, bool requires_grad = true);

// Read gradients out of the tape after backward, keyed like the store.
std::map<std::string, Tensor> collect_grads(const BoundParams& bound);

// Uniform init on [-s, s] with s = 1/sqrt(fan_in).
Tensor uniform_init(std::vector<Index> shape, Index fan_in, std::mt19937_64& rng);

}  // namespace deltamil
