// One slide's worth of patch features with grid coordinates and a label or
// survival record; the unit all experiments operate on.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deltamil/locality.hpp"
#include "deltamil/tensor.hpp"

namespace deltamil {

enum class Task { classification, survival };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct Survival {
  double time = 0.0;  // months, positive
  bool event = false; // true = death observed, false = censored
};

struct PatchBag {
  Tensor features;  // [N x c]
  std::vector<Coord> coords;
  std::optional<int> label;
  std::optional<Survival> survival;
  // Ground truth for evaluation only (synthetic bags); never fed to a model.
  std::vector<std::uint8_t> witness_mask;

  Index n_patches() const { return features.rows(); }
  Index feature_dim() const { return features.cols(); }
};

}  // namespace deltamil
