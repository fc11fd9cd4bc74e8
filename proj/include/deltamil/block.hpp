// GDN block: pre-norm RMS -> gated delta attention module (locality mix +
// delta scan + output fusion + projection) -> RMS -> SwiGLU gated MLP, with
// residuals and dropout around both sub-modules.
#pragma once

#include <random>
#include <string>

#include "deltamil/delta.hpp"
#include "deltamil/locality.hpp"
#include "deltamil/params.hpp"

namespace deltamil {

struct BlockConfig {
  Index d = 128;
  Index heads = 4;
  Index head_dim = 32;  // d_k = d_v; heads*head_dim must equal d
  Index d_ff = 512;
  Index chunk_size = 64;
  Index conv2d_extent = 3;  // odd
  Index conv1d_width = 4;
  double rms_eps = 1e-6;
  double dropout = 0.0;
  bool use_local = true;
  bool use_gated = true;
  bool use_delta = true;
};

// y_i = x_i / sqrt(mean_j x_ij^2 + eps) (.) gain, per token row.
Var rms_norm(Var x, Var gain, double eps);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// y = (silu(x W1) (.) (x W3)) W2
Var gated_mlp(Var x, Var w1, Var w3, Var w2);

// Registers all learnable arrays of one block under `prefix` (e.g. "blocks.0.").
// The pad token is model-level and lives outside the block prefix.
void init_block_params(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                       std::mt19937_64& rng);

struct BlockTrace {
  GateTrace gates;
};

// One block forward. `pad` is the model-wide learnable pad token. The trace
// pointer, when given, receives the recorded gate values.
Var block_forward(Var z, const GridLayout& layout, const BoundParams& params,
                  const std::string& prefix, Var pad, const BlockConfig& cfg, bool train,
                  std::mt19937_64& rng, BlockTrace* trace = nullptr);

// Sequential composition of L blocks ("blocks.0." ... "blocks.<L-1>.").
Var stack_forward(Var z, const GridLayout& layout, const BoundParams& params, Var pad,
                  const BlockConfig& cfg, Index layers, bool train, std::mt19937_64& rng,
                  std::vector<BlockTrace>* traces = nullptr);

}  // namespace deltamil
