// Locality-aware branch: rebuild the patch sequence into its 2D slide layout,
// run a depthwise convolution with a learnable pad token over it, flatten
// back, and fuse with the trunk; plus the short causal 1D conv used on the
// Q/K/V projections and the global/local output gate.
#pragma once

#include <vector>

#include "deltamil/tape.hpp"

namespace deltamil {

struct Coord {
  Index row = 0;
  Index col = 0;
  bool operator==(const Coord& o) const { return row == o.row && col == o.col; }
};

// Cell indexing for one bag's grid. Cells are row-major height x width.
struct GridLayout {
  Index height = 0;
  Index width = 0;
  std::vector<Index> cell_of_patch;  // patch i -> flat cell index
  std::vector<Index> patch_of_cell;  // flat cell -> patch index or -1
};

// Shift coords so the minimum row/col becomes zero (bags are slide crops).
std::vector<Coord> normalize_coords(std::vector<Coord> coords);

// Errors on duplicate coordinates (reports both patch indices). Warns once
// on stderr when the dense grid exceeds 64x the patch count.
GridLayout make_grid_layout(const std::vector<Coord>& coords);

struct PatchGrid {
  Index height = 0;
  Index width = 0;
  Tensor cells;            // [(height*width) x d]
  std::vector<bool> mask;  // occupancy per cell
};

// ---- tape ops ----
Var reconstruct_2d(Var z, Var pad, const GridLayout& layout);
Var depthwise_conv2d(Var grid_cells, Var kernels /* [d x kh x kw] */, Var pad, Index height,
                     Index width);
Var extract_2d(Var grid_cells, const GridLayout& layout);
Var lambda_fuse(Var z, Var z_local_seq, Var lambda);
Var short_conv1d(Var x, Var kernel /* [d x w], causal, zero left pad */);

struct GateFuseResult {
  Var out;   // G (.) h_global + (1-G) (.) h_local
  Var gate;  // G = sigma(h W_g + b_g)
};
GateFuseResult output_gate_fuse(Var h, Var h_global, Var h_local, Var w_g, Var b_g);

// ---- value-level forms ----
PatchGrid reconstruct_2d(const Tensor& z, const std::vector<Coord>& coords, const Tensor& pad);
PatchGrid depthwise_conv2d(const PatchGrid& grid, const Tensor& kernels, const Tensor& pad);
Tensor extract_2d(const PatchGrid& grid, const std::vector<Coord>& coords);
Tensor lambda_fuse(const Tensor& z, const Tensor& z_local_seq, double lambda);
Tensor short_conv1d(const Tensor& x, const Tensor& kernel);

}  // namespace deltamil
