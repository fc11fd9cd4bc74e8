#include "deltamil/locality.hpp"

#include <algorithm>
#include <iostream>

namespace deltamil {

std::vector<Coord> normalize_coords(std::vector<Coord> coords) {
  if (coords.empty()) return coords;
  Index min_r = coords[0].row, min_c = coords[0].col;
  for (const Coord& c : coords) {
    min_r = std::min(min_r, c.row);
    min_c = std::min(min_c, c.col);
  }
  for (Coord& c : coords) {
    c.row -= min_r;
    c.col -= min_c;
  }
  return coords;
}

GridLayout make_grid_layout(const std::vector<Coord>& coords) {
  if (coords.empty()) throw ShapeError("grid layout: no coordinates");
  GridLayout g;
  for (const Coord& c : coords) {
    if (c.row < 0 || c.col < 0) throw ValueError("grid layout: negative coordinate");
    g.height = std::max(g.height, c.row + 1);
    g.width = std::max(g.width, c.col + 1);
  }
  const Index n = static_cast<Index>(coords.size());
  if (g.height * g.width > 64 * n)
    std::cerr << "warning: grid " << g.height << "x" << g.width << " is over 64x the patch count "
              << n << "; materializing densely\n";
  g.cell_of_patch.resize(n);
  g.patch_of_cell.assign(g.height * g.width, -1);
  for (Index i = 0; i < n; ++i) {
    Index cell = coords[i].row * g.width + coords[i].col;
    if (g.patch_of_cell[cell] >= 0)
      throw ValueError("grid layout: duplicate coordinate (" + std::to_string(coords[i].row) +
                       "," + std::to_string(coords[i].col) + ") held by patches " +
                       std::to_string(g.patch_of_cell[cell]) + " and " + std::to_string(i));
    g.patch_of_cell[cell] = i;
    g.cell_of_patch[i] = cell;
  }
  return g;
}

Var reconstruct_2d(Var z, Var pad, const GridLayout& layout) {
  GradTape& t = *z.tape();
  const Tensor& zv = z.value();
  const Tensor& pv = pad.value();
  if (zv.rank() != 2) throw ShapeError("reconstruct_2d: Z must be rank-2");
  const Index d = zv.cols();
  if (pv.size() != d)
    throw ShapeError("reconstruct_2d: pad length " + shape_string(pv.shape()) +
                     " vs feature dim " + std::to_string(d));
  if (static_cast<Index>(layout.cell_of_patch.size()) != zv.rows())
    throw ShapeError("reconstruct_2d: layout patch count mismatch");
  const Index cells = layout.height * layout.width;
  Tensor out = Tensor::zeros({cells, d});
  for (Index cell = 0; cell < cells; ++cell) {
    Index p = layout.patch_of_cell[cell];
    if (p >= 0)
      out.mat().row(cell) = zv.mat().row(p);
    else
      out.mat().row(cell) = Eigen::Map<const Eigen::RowVectorXd>(pv.array().data(), d);
  }
  bool req = t.requires_grad(z.id()) || t.requires_grad(pad.id());
  Index zi = z.id(), pi = pad.id();
  GridLayout lay = layout;
  return t.emit(std::move(out), req, [zi, pi, lay, d](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(zi)) {
      Tensor& dz = tp.grad_buffer(zi);
      for (size_t p = 0; p < lay.cell_of_patch.size(); ++p)
        dz.mat().row(static_cast<Index>(p)) += g.mat().row(lay.cell_of_patch[p]);
    }
    if (tp.requires_grad(pi)) {
      Tensor& dp = tp.grad_buffer(pi);
      auto dpm = Eigen::Map<Eigen::RowVectorXd>(dp.array().data(), d);
      for (Index cell = 0; cell < lay.height * lay.width; ++cell)
        if (lay.patch_of_cell[cell] < 0) dpm += g.mat().row(cell);
    }
  });
}

Var depthwise_conv2d(Var grid_cells, Var kernels, Var pad, Index height, Index width) {
  GradTape& t = *grid_cells.tape();
  const Tensor& gv = grid_cells.value();
  const Tensor& kv = kernels.value();
  const Tensor& pv = pad.value();
  if (kv.rank() != 3) throw ShapeError("depthwise_conv2d: kernels must be [d x kh x kw]");
  const Index d = kv.shape()[0], kh = kv.shape()[1], kw = kv.shape()[2];
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("depthwise_conv2d: kernel extents must be odd, got " + std::to_string(kh) +
                     "x" + std::to_string(kw));
  if (gv.rank() != 2 || gv.cols() != d || gv.rows() != height * width)
    throw ShapeError("depthwise_conv2d: grid " + shape_string(gv.shape()) +
                     " inconsistent with layout/channels");
  if (pv.size() != d) throw ShapeError("depthwise_conv2d: pad length mismatch");
  const Index cu = kh / 2, cv = kw / 2;

  auto tap = [d, kh, kw](const Tensor& k, Index u, Index v) {
    return Eigen::Map<const Eigen::ArrayXd, 0, Eigen::InnerStride<>>(
        k.array().data() + u * kw + v, d, Eigen::InnerStride<>(kh * kw));
  };

  Tensor out = Tensor::zeros({height * width, d});
  Eigen::Map<const Eigen::ArrayXd> pad_arr(pv.array().data(), d);
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      auto out_row = out.mat().row(r * width + c).array();
      for (Index u = 0; u < kh; ++u) {
        for (Index v = 0; v < kw; ++v) {
          const Index rr = r + u - cu, cc = c + v - cv;
          const bool in = rr >= 0 && rr < height && cc >= 0 && cc < width;
          if (in)
            out_row += tap(kv, u, v).transpose() * gv.mat().row(rr * width + cc).array();
          else
            out_row += tap(kv, u, v).transpose() * pad_arr.transpose();
        }
      }
    }
  }

  bool req = t.requires_grad(grid_cells.id()) || t.requires_grad(kernels.id()) ||
             t.requires_grad(pad.id());
  Index gi = grid_cells.id(), ki = kernels.id(), pi = pad.id();
  return t.emit(std::move(out), req,
                [gi, ki, pi, height, width, d, kh, kw, cu, cv, tap](GradTape& tp, Index self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& gv = tp.value(gi);
                  const Tensor& kv = tp.value(ki);
                  const Tensor& pv = tp.value(pi);
                  Eigen::Map<const Eigen::ArrayXd> pad_arr(pv.array().data(), d);
                  const bool need_g = tp.requires_grad(gi);
                  const bool need_k = tp.requires_grad(ki);
                  const bool need_p = tp.requires_grad(pi);
                  for (Index r = 0; r < height; ++r) {
                    for (Index c = 0; c < width; ++c) {
                      auto go = g.mat().row(r * width + c).array();
                      for (Index u = 0; u < kh; ++u) {
                        for (Index v = 0; v < kw; ++v) {
                          const Index rr = r + u - cu, cc = c + v - cv;
                          const bool in = rr >= 0 && rr < height && cc >= 0 && cc < width;
                          if (need_k) {
                            Tensor& dk = tp.grad_buffer(ki);
                            auto dk_tap = Eigen::Map<Eigen::ArrayXd, 0, Eigen::InnerStride<>>(
                                dk.array().data() + u * kw + v, d, Eigen::InnerStride<>(kh * kw));
                            if (in)
                              dk_tap += go.transpose() * gv.mat().row(rr * width + cc).array().transpose();
                            else
                              dk_tap += go.transpose() * pad_arr;
                          }
                          if (in && need_g)
                            tp.grad_buffer(gi).mat().row(rr * width + cc).array() +=
                                tap(kv, u, v).transpose() * go;
                          if (!in && need_p) {
                            Tensor& dp = tp.grad_buffer(pi);
                            Eigen::Map<Eigen::ArrayXd>(dp.array().data(), d) +=
                                tap(kv, u, v) * go.transpose();
                          }
                        }
                      }
                    }
                  }
                });
}

Var extract_2d(Var grid_cells, const GridLayout& layout) {
  GradTape& t = *grid_cells.tape();
  const Tensor& gv = grid_cells.value();
  if (gv.rank() != 2 || gv.rows() != layout.height * layout.width)
    throw ShapeError("extract_2d: grid shape " + shape_string(gv.shape()) +
                     " inconsistent with layout");
  const Index n = static_cast<Index>(layout.cell_of_patch.size());
  const Index d = gv.cols();
  Tensor out = Tensor::zeros({n, d});
  for (Index i = 0; i < n; ++i) out.mat().row(i) = gv.mat().row(layout.cell_of_patch[i]);
  Index gi = grid_cells.id();
  std::vector<Index> cells = layout.cell_of_patch;
  return t.emit(std::move(out), t.requires_grad(gi), [gi, cells](GradTape& tp, Index self) {
    if (!tp.requires_grad(gi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& dg = tp.grad_buffer(gi);
    for (size_t i = 0; i < cells.size(); ++i)
      dg.mat().row(cells[i]) += g.mat().row(static_cast<Index>(i));
  });
}

Var lambda_fuse(Var z, Var z_local_seq, Var lambda) {
  check_same_shape(z.value(), z_local_seq.value(), "lambda_fuse");
  return add(z, mul(z_local_seq, tanh(lambda)));
}

Var short_conv1d(Var x, Var kernel) {
  GradTape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 2 || kv.rank() != 2 || kv.rows() != xv.cols())
    throw ShapeError("short_conv1d: x " + shape_string(xv.shape()) + " vs kernel " +
                     shape_string(kv.shape()));
  const Index n = xv.rows(), d = xv.cols(), w = kv.cols();
  Tensor out = Tensor::zeros({n, d});
  for (Index tk = 0; tk < n; ++tk) {
    auto out_row = out.mat().row(tk).array();
    for (Index j = 0; j < w; ++j) {
      const Index s = tk - (w - 1) + j;
      if (s < 0) continue;  // zero left padding
      out_row += kv.mat().col(j).transpose().array() * xv.mat().row(s).array();
    }
  }
  bool req = t.requires_grad(x.id()) || t.requires_grad(kernel.id());
  Index xi = x.id(), ki = kernel.id();
  return t.emit(std::move(out), req, [xi, ki, n, d, w](GradTape& tp, Index self) {
    (void)d;
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(xi);
    const Tensor& kv = tp.value(ki);
    for (Index tk = 0; tk < n; ++tk) {
      auto go = g.mat().row(tk).array();
      for (Index j = 0; j < w; ++j) {
        const Index s = tk - (w - 1) + j;
        if (s < 0) continue;
        if (tp.requires_grad(xi))
          tp.grad_buffer(xi).mat().row(s).array() += kv.mat().col(j).transpose().array() * go;
        if (tp.requires_grad(ki))
          tp.grad_buffer(ki).mat().col(j).array() +=
              (go * xv.mat().row(s).array()).transpose();
      }
    }
  });
}

GateFuseResult output_gate_fuse(Var h, Var h_global, Var h_local, Var w_g, Var b_g) {
  check_same_shape(h_global.value(), h_local.value(), "output_gate_fuse");
  Var gate = sigmoid(row_broadcast_add(matmul(h, w_g), b_g));
  check_same_shape(gate.value(), h_global.value(), "output_gate_fuse");
  Var out = add(mul(gate, h_global), mul(rsub_scalar(gate, 1.0), h_local));
  return {out, gate};
}

// ---- value-level forms ----

PatchGrid reconstruct_2d(const Tensor& z, const std::vector<Coord>& coords, const Tensor& pad) {
  GridLayout layout = make_grid_layout(coords);
  GradTape t;
  Var cells = reconstruct_2d(t.constant(z), t.constant(pad), layout);
  PatchGrid g;
  g.height = layout.height;
  g.width = layout.width;
  g.cells = cells.value();
  g.mask.assign(layout.height * layout.width, false);
  for (Index cell : layout.cell_of_patch) g.mask[cell] = true;
  return g;
}

PatchGrid depthwise_conv2d(const PatchGrid& grid, const Tensor& kernels, const Tensor& pad) {
  GradTape t;
  Var out = depthwise_conv2d(t.constant(grid.cells), t.constant(kernels), t.constant(pad),
                             grid.height, grid.width);
  PatchGrid g = grid;
  g.cells = out.value();
  return g;
}

Tensor extract_2d(const PatchGrid& grid, const std::vector<Coord>& coords) {
  GridLayout layout;
  layout.height = grid.height;
  layout.width = grid.width;
  for (size_t i = 0; i < coords.size(); ++i) {
    const Coord& c = coords[i];
    if (c.row < 0 || c.row >= grid.height || c.col < 0 || c.col >= grid.width)
      throw ValueError("extract_2d: coordinate (" + std::to_string(c.row) + "," +
                       std::to_string(c.col) + ") outside grid " + std::to_string(grid.height) +
                       "x" + std::to_string(grid.width));
    layout.cell_of_patch.push_back(c.row * grid.width + c.col);
  }
  GradTape t;
  return extract_2d(t.constant(grid.cells), layout).value();
}

Tensor lambda_fuse(const Tensor& z, const Tensor& z_local_seq, double lambda) {
  GradTape t;
  return lambda_fuse(t.constant(z), t.constant(z_local_seq), t.constant(Tensor::scalar(lambda)))
      .value();
}

Tensor short_conv1d(const Tensor& x, const Tensor& kernel) {
  GradTape t;
  return short_conv1d(t.constant(x), t.constant(kernel)).value();
}

}  // namespace deltamil
