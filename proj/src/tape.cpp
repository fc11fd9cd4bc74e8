#include "deltamil/tape.hpp"

#include <cmath>

namespace deltamil {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

Var GradTape::leaf(Tensor value, bool requires_grad) {
  Var v = emit(std::move(value), requires_grad, nullptr);
  if (requires_grad) leaves_.push_back(v.id());
  return v;
}

Var GradTape::emit(Tensor value, bool requires_grad, BackFn back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = requires_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<Index>(nodes_.size()) - 1);
}

Tensor& GradTape::grad_buffer(Index id) {
  Node& n = nodes_[id];
  if (!n.grad_live) {
    n.grad = Tensor::zeros(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

void GradTape::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.grad_live = false;
  }
}

void GradTape::backward(Var loss) {
  if (loss.tape() != this) throw ValueError("backward: loss var belongs to another tape");
  if (loss.value().size() != 1)
    throw ValueError("backward: loss must be scalar, got " + shape_string(loss.value().shape()));
  zero_grad();
  grad_buffer(loss.id()).array().setConstant(1.0);
  for (Index i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.grad_live || !n.requires_grad) continue;
    if (n.back) n.back(*this, i);
  }
  for (Index id : leaves_)
    if (!nodes_[id].grad_live) grad_buffer(id);
}

namespace {

void check_same_tape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw ValueError(std::string(op) + ": mixed tapes");
}

// Accumulate g (possibly reduced to scalar) into parent p.
void accum(GradTape& t, Index p, const Eigen::ArrayXd& g) {
  t.grad_buffer(p).array() += g;
}

void accum_scalar(GradTape& t, Index p, double g) { t.grad_buffer(p).array()[0] += g; }

enum class BinKind { kAdd, kSub, kMul, kDiv };

Var binary_op(Var a, Var b, BinKind kind, const char* name) {
  check_same_tape(a, b, name);
  GradTape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_scalar = av.size() == 1;
  const bool b_scalar = bv.size() == 1;
  if (!a_scalar && !b_scalar && !av.same_shape(bv))
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()));

  // keep the left operand's shape unless only the left side is the scalar
  const std::vector<Index> out_shape = (a_scalar && !b_scalar) ? bv.shape() : av.shape();
  Eigen::ArrayXd out(numel(out_shape));
  auto lhs = [&](Index i) { return a_scalar ? av[0] : av[i]; };
  auto rhs = [&](Index i) { return b_scalar ? bv[0] : bv[i]; };
  for (Index i = 0; i < out.size(); ++i) {
    switch (kind) {
      case BinKind::kAdd: out[i] = lhs(i) + rhs(i); break;
      case BinKind::kSub: out[i] = lhs(i) - rhs(i); break;
      case BinKind::kMul: out[i] = lhs(i) * rhs(i); break;
      case BinKind::kDiv: out[i] = lhs(i) / rhs(i); break;
    }
  }

  bool req = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Index ai = a.id(), bi = b.id();
  return t.emit(
      Tensor(out_shape, std::move(out)), req,
      [ai, bi, kind, a_scalar, b_scalar](GradTape& tp, Index self) {
        const Eigen::ArrayXd& g = tp.grad(self).array();
        const Eigen::ArrayXd& av = tp.value(ai).array();
        const Eigen::ArrayXd& bv = tp.value(bi).array();
        auto lhs = [&](Index i) { return a_scalar ? av[0] : av[i]; };
        auto rhs = [&](Index i) { return b_scalar ? bv[0] : bv[i]; };
        if (tp.requires_grad(ai)) {
          Eigen::ArrayXd da = Eigen::ArrayXd::Zero(g.size());
          for (Index i = 0; i < g.size(); ++i) {
            switch (kind) {
              case BinKind::kAdd: da[i] = g[i]; break;
              case BinKind::kSub: da[i] = g[i]; break;
              case BinKind::kMul: da[i] = g[i] * rhs(i); break;
              case BinKind::kDiv: da[i] = g[i] / rhs(i); break;
            }
          }
          if (a_scalar)
            accum_scalar(tp, ai, da.sum());
          else
            accum(tp, ai, da);
        }
        if (tp.requires_grad(bi)) {
          Eigen::ArrayXd db = Eigen::ArrayXd::Zero(g.size());
          for (Index i = 0; i < g.size(); ++i) {
            switch (kind) {
              case BinKind::kAdd: db[i] = g[i]; break;
              case BinKind::kSub: db[i] = -g[i]; break;
              case BinKind::kMul: db[i] = g[i] * lhs(i); break;
              case BinKind::kDiv: db[i] = -g[i] * lhs(i) / (rhs(i) * rhs(i)); break;
            }
          }
          if (b_scalar)
            accum_scalar(tp, bi, db.sum());
          else
            accum(tp, bi, db);
        }
      });
}

using UnaryFwd = double (*)(double);

Var unary_op(Var a, const std::function<double(double)>& f,
             const std::function<double(double, double)>& dfdx /* (x, y) -> dy/dx */) {
  GradTape& t = *a.tape();
  const Tensor& av = a.value();
  Eigen::ArrayXd out(av.size());
  for (Index i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Index ai = a.id();
  return t.emit(Tensor(av.shape(), std::move(out)), t.requires_grad(ai),
                [ai, dfdx](GradTape& tp, Index self) {
                  if (!tp.requires_grad(ai)) return;
                  const Eigen::ArrayXd& g = tp.grad(self).array();
                  const Eigen::ArrayXd& x = tp.value(ai).array();
                  const Eigen::ArrayXd& y = tp.value(self).array();
                  Eigen::ArrayXd da(g.size());
                  for (Index i = 0; i < g.size(); ++i) da[i] = g[i] * dfdx(x[i], y[i]);
                  accum(tp, ai, da);
                });
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) { return binary_op(a, b, BinKind::kAdd, "add"); }
Var sub(Var a, Var b) { return binary_op(a, b, BinKind::kSub, "sub"); }
Var mul(Var a, Var b) { return binary_op(a, b, BinKind::kMul, "mul"); }
Var div(Var a, Var b) { return binary_op(a, b, BinKind::kDiv, "div"); }

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  GradTape& t = *a.tape();
  Tensor out = matmul(a.value(), b.value());
  bool req = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Index ai = a.id(), bi = b.id();
  return t.emit(std::move(out), req, [ai, bi](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) tp.grad_buffer(ai).mat().noalias() += g.mat() * bv.mat().transpose();
    if (tp.requires_grad(bi)) tp.grad_buffer(bi).mat().noalias() += av.mat().transpose() * g.mat();
  });
}

Var scale(Var a, double c) {
  GradTape& t = *a.tape();
  Index ai = a.id();
  return t.emit(Tensor(a.value().shape(), a.value().array() * c), t.requires_grad(ai),
                [ai, c](GradTape& tp, Index self) {
                  if (tp.requires_grad(ai)) accum(tp, ai, tp.grad(self).array() * c);
                });
}

Var add_scalar(Var a, double c) {
  GradTape& t = *a.tape();
  Index ai = a.id();
  return t.emit(Tensor(a.value().shape(), a.value().array() + c), t.requires_grad(ai),
                [ai](GradTape& tp, Index self) {
                  if (tp.requires_grad(ai)) accum(tp, ai, tp.grad(self).array());
                });
}

Var rsub_scalar(Var a, double c) {
  GradTape& t = *a.tape();
  Index ai = a.id();
  return t.emit(Tensor(a.value().shape(), c - a.value().array()), t.requires_grad(ai),
                [ai](GradTape& tp, Index self) {
                  if (tp.requires_grad(ai)) accum(tp, ai, -tp.grad(self).array());
                });
}

Var neg(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  return unary_op(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Var silu(Var a) {
  return unary_op(a, [](double x) { return x * sigmoid_scalar(x); },
                  [](double x, double) {
                    double s = sigmoid_scalar(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Var exp(Var a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  const Eigen::ArrayXd& x = a.value().array();
  for (Index i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0))
      throw ValueError("log: non-positive entry " + std::to_string(x[i]) + " at index " +
                       std::to_string(i));
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Var pow_scalar(Var a, double p) {
  return unary_op(a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var clamp_min(Var a, double c) {
  return unary_op(a, [c](double x) { return x < c ? c : x; },
                  [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Var elementwise(const std::string& tag, Var a) {
  if (tag == "sigmoid") return sigmoid(a);
  if (tag == "tanh") return tanh(a);
  if (tag == "silu") return silu(a);
  if (tag == "exp") return exp(a);
  if (tag == "log") return log(a);
  throw ValueError("elementwise: unknown unary tag '" + tag + "'");
}

Var elementwise(const std::string& tag, Var a, Var b) {
  if (tag == "add") return add(a, b);
  if (tag == "sub") return sub(a, b);
  if (tag == "mul") return mul(a, b);
  if (tag == "scale") {
    if (b.value().size() != 1) throw ShapeError("elementwise scale: second operand must be scalar");
    return mul(a, b);
  }
  throw ValueError("elementwise: unknown binary tag '" + tag + "'");
}

Var sum(Var a) {
  GradTape& t = *a.tape();
  Index ai = a.id();
  return t.emit(Tensor::scalar(a.value().array().sum()), t.requires_grad(ai),
                [ai](GradTape& tp, Index self) {
                  if (!tp.requires_grad(ai)) return;
                  tp.grad_buffer(ai).array() += tp.grad(self).array()[0];
                });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_mean(Var a) {
  GradTape& t = *a.tape();
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("row_mean: expects rank-2, got " + shape_string(av.shape()));
  Index n = av.rows(), d = av.cols();
  Tensor out = Tensor::zeros({n});
  for (Index i = 0; i < n; ++i) out[i] = av.mat().row(i).mean();
  Index ai = a.id();
  return t.emit(std::move(out), t.requires_grad(ai), [ai, n, d](GradTape& tp, Index self) {
    if (!tp.requires_grad(ai)) return;
    const Tensor& g = tp.grad(self);
    Tensor& da = tp.grad_buffer(ai);
    for (Index i = 0; i < n; ++i) da.mat().row(i).array() += g[i] / static_cast<double>(d);
  });
}

Var mul_colvec(Var x, Var u) {
  check_same_tape(x, u, "mul_colvec");
  GradTape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& uv = u.value();
  if (xv.rank() != 2 || uv.size() != xv.rows())
    throw ShapeError("mul_colvec: " + shape_string(xv.shape()) + " vs " +
                     shape_string(uv.shape()));
  Tensor out = Tensor::zeros(xv.shape());
  for (Index i = 0; i < xv.rows(); ++i) out.mat().row(i) = xv.mat().row(i) * uv[i];
  bool req = t.requires_grad(x.id()) || t.requires_grad(u.id());
  Index xi = x.id(), ui = u.id();
  return t.emit(std::move(out), req, [xi, ui](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(xi);
    const Tensor& uv = tp.value(ui);
    if (tp.requires_grad(xi)) {
      Tensor& dx = tp.grad_buffer(xi);
      for (Index i = 0; i < xv.rows(); ++i) dx.mat().row(i) += g.mat().row(i) * uv[i];
    }
    if (tp.requires_grad(ui)) {
      Tensor& du = tp.grad_buffer(ui);
      for (Index i = 0; i < xv.rows(); ++i) du[i] += g.mat().row(i).dot(xv.mat().row(i));
    }
  });
}

Var mul_rowvec(Var x, Var v) {
  check_same_tape(x, v, "mul_rowvec");
  GradTape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.rank() != 2 || vv.size() != xv.cols())
    throw ShapeError("mul_rowvec: " + shape_string(xv.shape()) + " vs " +
                     shape_string(vv.shape()));
  Tensor out = Tensor::zeros(xv.shape());
  for (Index i = 0; i < xv.rows(); ++i)
    out.mat().row(i) = xv.mat().row(i).cwiseProduct(vv.mat().row(0));
  bool req = t.requires_grad(x.id()) || t.requires_grad(v.id());
  Index xi = x.id(), vi = v.id();
  return t.emit(std::move(out), req, [xi, vi](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(xi);
    const Tensor& vv = tp.value(vi);
    if (tp.requires_grad(xi)) {
      Tensor& dx = tp.grad_buffer(xi);
      for (Index i = 0; i < xv.rows(); ++i)
        dx.mat().row(i) += g.mat().row(i).cwiseProduct(vv.mat().row(0));
    }
    if (tp.requires_grad(vi)) {
      Tensor& dv = tp.grad_buffer(vi);
      for (Index i = 0; i < xv.rows(); ++i)
        dv.mat().row(0) += g.mat().row(i).cwiseProduct(xv.mat().row(i));
    }
  });
}

Var row_broadcast_add(Var x, Var b) {
  check_same_tape(x, b, "row_broadcast_add");
  GradTape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || bv.size() != xv.cols())
    throw ShapeError("row_broadcast_add: " + shape_string(xv.shape()) + " vs " +
                     shape_string(bv.shape()));
  Tensor out = Tensor::zeros(xv.shape());
  for (Index i = 0; i < xv.rows(); ++i) out.mat().row(i) = xv.mat().row(i) + bv.mat().row(0);
  bool req = t.requires_grad(x.id()) || t.requires_grad(b.id());
  Index xi = x.id(), bi = b.id();
  return t.emit(std::move(out), req, [xi, bi](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(xi)) accum(tp, xi, g.array());
    if (tp.requires_grad(bi)) {
      Tensor& db = tp.grad_buffer(bi);
      for (Index i = 0; i < g.rows(); ++i) db.mat().row(0) += g.mat().row(i);
    }
  });
}

Var reshape(Var a, std::vector<Index> shape) {
  GradTape& t = *a.tape();
  Tensor out = a.value().reshaped(shape);
  Index ai = a.id();
  return t.emit(std::move(out), t.requires_grad(ai), [ai](GradTape& tp, Index self) {
    if (tp.requires_grad(ai)) accum(tp, ai, tp.grad(self).array());
  });
}

Var slice_block(Var a, Index r0, Index nr, Index c0, Index nc) {
  GradTape& t = *a.tape();
  const Tensor& av = a.value();
  if (av.rank() != 2)
    throw ShapeError("slice_block: expects rank-2, got " + shape_string(av.shape()));
  if (r0 < 0 || c0 < 0 || r0 + nr > av.rows() || c0 + nc > av.cols())
    throw ShapeError("slice_block: block out of range for " + shape_string(av.shape()));
  Tensor out = Tensor::zeros({nr, nc});
  out.mat() = av.mat().block(r0, c0, nr, nc);
  Index ai = a.id();
  return t.emit(std::move(out), t.requires_grad(ai),
                [ai, r0, c0, nr, nc](GradTape& tp, Index self) {
                  if (!tp.requires_grad(ai)) return;
                  tp.grad_buffer(ai).mat().block(r0, c0, nr, nc) += tp.grad(self).mat();
                });
}

Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  GradTape& t = *rows[0].tape();
  Index d = rows[0].value().size();
  Index n = static_cast<Index>(rows.size());
  Tensor out = Tensor::zeros({n, d});
  bool req = false;
  std::vector<Index> ids(rows.size());
  for (Index i = 0; i < n; ++i) {
    if (rows[i].value().size() != d) throw ShapeError("stack_rows: row length mismatch");
    out.mat().row(i) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].value().array().data(), d);
    ids[i] = rows[i].id();
    req = req || t.requires_grad(ids[i]);
  }
  return t.emit(std::move(out), req, [ids, d](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (!tp.requires_grad(ids[i])) continue;
      Tensor& dr = tp.grad_buffer(ids[i]);
      Eigen::Map<Eigen::RowVectorXd>(dr.array().data(), d) += g.mat().row(static_cast<Index>(i));
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  GradTape& t = *parts[0].tape();
  Index n = parts[0].value().rows();
  Index total = 0;
  bool req = false;
  std::vector<Index> ids, widths;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != n)
      throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
    req = req || t.requires_grad(p.id());
  }
  Tensor out = Tensor::zeros({n, total});
  Index c = 0;
  for (const Var& p : parts) {
    out.mat().block(0, c, n, p.value().cols()) = p.value().mat();
    c += p.value().cols();
  }
  return t.emit(std::move(out), req, [ids, widths, n](GradTape& tp, Index self) {
    const Tensor& g = tp.grad(self);
    Index c = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i]))
        tp.grad_buffer(ids[i]).mat() += g.mat().block(0, c, n, widths[i]);
      c += widths[i];
    }
  });
}

Var select(Var a, Index flat_index) {
  GradTape& t = *a.tape();
  if (flat_index < 0 || flat_index >= a.value().size())
    throw ShapeError("select: index " + std::to_string(flat_index) + " out of range for " +
                     shape_string(a.value().shape()));
  Index ai = a.id();
  return t.emit(Tensor::scalar(a.value()[flat_index]), t.requires_grad(ai),
                [ai, flat_index](GradTape& tp, Index self) {
                  if (!tp.requires_grad(ai)) return;
                  tp.grad_buffer(ai).array()[flat_index] += tp.grad(self).array()[0];
                });
}

Var col_max(Var a) {
  GradTape& t = *a.tape();
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("col_max: expects rank-2, got " + shape_string(av.shape()));
  Index n = av.rows(), d = av.cols();
  Tensor out = Tensor::zeros({d});
  std::vector<Index> arg(d, 0);
  for (Index j = 0; j < d; ++j) {
    double best = av.at(0, j);
    for (Index i = 1; i < n; ++i)
      if (av.at(i, j) > best) {
        best = av.at(i, j);
        arg[j] = i;
      }
    out[j] = best;
  }
  Index ai = a.id();
  return t.emit(std::move(out), t.requires_grad(ai), [ai, arg](GradTape& tp, Index self) {
    if (!tp.requires_grad(ai)) return;
    const Tensor& g = tp.grad(self);
    Tensor& da = tp.grad_buffer(ai);
    for (size_t j = 0; j < arg.size(); ++j) da.at(arg[j], static_cast<Index>(j)) += g[j];
  });
}

Var dropout(Var x, double rate, std::mt19937_64& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return x;
  GradTape& t = *x.tape();
  Tensor mask = Tensor::zeros(x.value().shape());
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  for (Index i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? inv : 0.0;
  return mul(x, t.constant(std::move(mask)));
}

double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> params, const std::vector<Tensor>& analytic,
                         double h, FdWorst* worst) {
  if (!(h > 0.0)) throw ValueError("finite_diff_check: h must be positive");
  if (params.size() != analytic.size())
    throw ShapeError("finite_diff_check: params/analytic count mismatch");
  const double base1 = f(params);
  const double base2 = f(params);
  if (base1 != base2)
    throw ValueError("finite_diff_check: f is non-deterministic (" + std::to_string(base1) +
                     " vs " + std::to_string(base2) + ")");
  FdWorst w;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params[p].same_shape(analytic[p]))
      throw ShapeError("finite_diff_check: gradient shape mismatch for param " +
                       std::to_string(p));
    for (Index i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double fp = f(params);
      params[p][i] = saved - h;
      const double fm = f(params);
      params[p][i] = saved;
      const double gn = (fp - fm) / (2.0 * h);
      const double ga = analytic[p][i];
      const double rel = std::abs(ga - gn) / (std::abs(ga) + std::abs(gn) + 1e-12);
      if (rel > w.rel_err) {
        w.rel_err = rel;
        w.param = static_cast<Index>(p);
        w.entry = i;
        w.analytic = ga;
        w.numeric = gn;
      }
    }
  }
  if (worst) *worst = w;
  return w.rel_err;
}

}  // namespace deltamil
