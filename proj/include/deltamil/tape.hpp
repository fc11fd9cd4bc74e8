// Reverse-mode differentiation over Tensor values.
//
// A GradTape owns an ordered node list; Var is a cheap handle into it.
// Forward math is expressed through free functions that register a node and
// a local backward closure. backward() runs reverse accumulation in strict
// node order, so replays are bit-identical.
#pragma once

#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "deltamil/tensor.hpp"

namespace deltamil {

class GradTape;

class Var {
 public:
  Var() = default;
  Var(GradTape* tape, Index id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  const std::vector<Index>& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  Index id() const { return id_; }
  GradTape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  GradTape* tape_ = nullptr;
  Index id_ = -1;
};

class GradTape {
 public:
  using BackFn = std::function<void(GradTape&, Index self)>;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Reverse accumulation from a scalar loss. Grads are reset first, so a
  // replay on the same tape gives bit-identical results. Every grad-requiring
  // leaf ends up with a gradient (zeros when unused by the loss).
  void backward(Var loss);
  void zero_grad();

  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Internals shared with the op implementations.
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    bool requires_grad = false;
    bool grad_live = false;
    BackFn back;
  };

  Var emit(Tensor value, bool requires_grad, BackFn back);
  const Tensor& value(Index id) const { return nodes_[id].value; }
  const Tensor& grad(Index id) const { return nodes_[id].grad; }
  bool requires_grad(Index id) const { return nodes_[id].requires_grad; }
  // Accumulation buffer for a node's gradient, allocated as zeros on demand.
  Tensor& grad_buffer(Index id);
  bool grad_live(Index id) const { return nodes_[id].grad_live; }

 private:
  // deque: node references stay valid while the tape grows
  std::deque<Node> nodes_;
  std::vector<Index> leaves_;
};

// ---- arithmetic ----
// Binary ops take equal shapes or a scalar (size-1) on either side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var matmul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var rsub_scalar(Var a, double c);  // c - a
Var neg(Var a);

// ---- pointwise ----
Var sigmoid(Var a);
Var tanh(Var a);
Var silu(Var a);
Var exp(Var a);
Var log(Var a);  // errors on non-positive entries
Var sqrt(Var a);
Var pow_scalar(Var a, double p);
Var clamp_min(Var a, double c);

// Spec-facing dispatcher over the published op-tag set.
Var elementwise(const std::string& tag, Var a);
Var elementwise(const std::string& tag, Var a, Var b);

// ---- reductions and broadcasts ----
Var sum(Var a);
Var mean(Var a);
Var row_mean(Var a);             // [N x d] -> [N]
Var mul_colvec(Var x, Var u);    // scale row i by u[i]
Var mul_rowvec(Var x, Var v);    // scale column j by v[j]
Var row_broadcast_add(Var x, Var b);  // add b to every row

// ---- structure ----
Var reshape(Var a, std::vector<Index> shape);
Var slice_block(Var a, Index r0, Index nr, Index c0, Index nc);
Var stack_rows(const std::vector<Var>& rows);
Var concat_cols(const std::vector<Var>& parts);
Var select(Var a, Index flat_index);  // -> scalar
Var col_max(Var a);                   // [N x d] -> [d], first argmax on ties

// Inverted dropout; identity when train is off or rate is 0.
Var dropout(Var x, double rate, std::mt19937_64& rng, bool train);

// ---- finite-difference oracle ----
struct FdWorst {
  double rel_err = 0.0;
  Index param = -1;
  Index entry = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences against analytic grads; returns the worst relative
// error max |ga-gn| / (|ga|+|gn|+1e-12). Two baseline evaluations must agree
// exactly or a ValueError is raised (non-deterministic f).
double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> params, const std::vector<Tensor>& analytic,
                         double h, FdWorst* worst = nullptr);

}  // namespace deltamil
