#include "deltamil/delta.hpp"

#include <cmath>

namespace deltamil {

namespace {

constexpr double kZeroKeyTol = 1e-12;
constexpr double kUnitKeyTol = 1e-6;

void check_key_norm(const Tensor& k) {
  double n = std::sqrt(k.array().square().sum());
  if (n <= kZeroKeyTol) return;  // no-op write
  if (std::abs(n - 1.0) > kUnitKeyTol)
    throw ValueError("delta_step: key norm " + std::to_string(n) +
                     " deviates from 1 by more than 1e-6 (caller skipped normalization?)");
}

Var as_column(Var x) {
  const Index n = x.value().size();
  if (x.value().rank() == 2 && x.value().cols() == 1) return x;
  return reshape(x, {n, 1});
}

Var as_scalar(Var x, const char* what) {
  if (x.value().size() != 1)
    throw ShapeError(std::string(what) + ": expected scalar, got " +
                     shape_string(x.value().shape()));
  return x;
}

Var normalize_keys_impl(Var k_raw, Index heads, bool allow_zero) {
  GradTape& t = *k_raw.tape();
  const Tensor& kv = k_raw.value();
  if (kv.rank() != 2 || kv.cols() % heads != 0)
    throw ShapeError("normalize_keys: shape " + shape_string(kv.shape()) +
                     " not divisible into " + std::to_string(heads) + " heads");
  const Index n = kv.rows();
  const Index dk = kv.cols() / heads;
  Tensor out = Tensor::zeros(kv.shape());
  std::vector<double> norms(static_cast<size_t>(n * heads));
  for (Index i = 0; i < n; ++i) {
    for (Index h = 0; h < heads; ++h) {
      auto seg = kv.mat().row(i).segment(h * dk, dk);
      double norm = seg.norm();
      norms[i * heads + h] = norm;
      if (norm <= kZeroKeyTol) {
        if (!allow_zero)
          throw ValueError("normalize_keys: zero-norm key row at token " + std::to_string(i) +
                           ", head " + std::to_string(h) + " (degenerate projection)");
        out.mat().row(i).segment(h * dk, dk).setZero();
      } else {
        out.mat().row(i).segment(h * dk, dk) = seg / norm;
      }
    }
  }
  Index ki = k_raw.id();
  return t.emit(std::move(out), t.requires_grad(ki),
                [ki, n, heads, dk, norms](GradTape& tp, Index self) {
                  if (!tp.requires_grad(ki)) return;
                  const Tensor& g = tp.grad(self);
                  const Tensor& y = tp.value(self);
                  Tensor& dk_raw = tp.grad_buffer(ki);
                  for (Index i = 0; i < n; ++i) {
                    for (Index h = 0; h < heads; ++h) {
                      double norm = norms[i * heads + h];
                      if (norm <= kZeroKeyTol) continue;  // constant region
                      auto gy = g.mat().row(i).segment(h * dk, dk);
                      auto yy = y.mat().row(i).segment(h * dk, dk);
                      double dot = gy.dot(yy);
                      dk_raw.mat().row(i).segment(h * dk, dk) += (gy - dot * yy) / norm;
                    }
                  }
                });
}

}  // namespace

GateVars compute_gates(Var h, Var w_alpha, Var w_beta, Var b_alpha, Var b_beta) {
  Var a = sigmoid(row_broadcast_add(matmul(h, w_alpha), b_alpha));
  Var b = sigmoid(row_broadcast_add(matmul(h, w_beta), b_beta));
  return {a, b};
}

GateTrace record_trace(const GateVars& gates) {
  GateTrace tr;
  tr.alpha = gates.alpha.value();
  tr.beta = gates.beta.value();
  return tr;
}

DeltaStepResult delta_step(Var s_prev, Var k, Var v, Var alpha, Var beta) {
  k = as_column(k);
  v = as_column(v);
  alpha = as_scalar(alpha, "delta_step alpha");
  beta = as_scalar(beta, "delta_step beta");
  check_key_norm(k.value());
  const Index dk = k.value().rows();
  if (s_prev.value().rank() != 2 || s_prev.value().cols() != dk)
    throw ShapeError("delta_step: state " + shape_string(s_prev.value().shape()) +
                     " incompatible with key length " + std::to_string(dk));

  Var k_row = reshape(k, {1, dk});
  Var v_old = mul(matmul(s_prev, k), alpha);                        // a S k
  Var v_new = add(mul(v, beta), mul(v_old, rsub_scalar(beta, 1.0)));  // b v + (1-b) v_old
  Var s_decay = mul(s_prev, alpha);
  Var s_next = add(sub(s_decay, matmul(v_old, k_row)), matmul(v_new, k_row));
  return {s_next, v_old, v_new};
}

Var delta_step_compact(Var s_prev, Var k, Var v, Var alpha, Var beta) {
  k = as_column(k);
  v = as_column(v);
  alpha = as_scalar(alpha, "delta_step_compact alpha");
  beta = as_scalar(beta, "delta_step_compact beta");
  check_key_norm(k.value());
  GradTape& t = *k.tape();
  const Index dk = k.value().rows();
  if (s_prev.value().rank() != 2 || s_prev.value().cols() != dk)
    throw ShapeError("delta_step_compact: state " + shape_string(s_prev.value().shape()) +
                     " incompatible with key length " + std::to_string(dk));

  Var k_row = reshape(k, {1, dk});
  Var eye = t.constant(Tensor::identity(dk));
  Var gate_factor = mul(sub(eye, mul(matmul(k, k_row), beta)), alpha);  // a (I - b k k^T)
  Var write = mul(matmul(v, k_row), beta);                              // b v k^T
  return add(matmul(s_prev, gate_factor), write);
}

namespace {

// Shared inner loop: scan tokens [t0, t1) of the given per-chunk blocks.
void scan_tokens(const QkvVars& qkv, Var q_blk, Var k_blk, Var v_blk, Var a_blk, Var b_blk,
                 Index len, std::vector<Var>& state, const ScanOptions& opts,
                 std::vector<std::vector<Var>>& outputs) {
  for (Index t = 0; t < len; ++t) {
    for (Index h = 0; h < qkv.heads; ++h) {
      Var k_t = slice_block(k_blk, t, 1, h * qkv.dk, qkv.dk);
      Var v_t = slice_block(v_blk, t, 1, h * qkv.dv, qkv.dv);
      Var q_t = slice_block(q_blk, t, 1, h * qkv.dk, qkv.dk);
      Var a_t = slice_block(a_blk, t, 1, h, 1);
      Var b_t = slice_block(b_blk, t, 1, h, 1);
      Var k_col = reshape(k_t, {qkv.dk, 1});
      Var v_col = reshape(v_t, {qkv.dv, 1});
      if (opts.delta_removal) {
        state[h] = delta_step(state[h], k_col, v_col, a_t, b_t).s_next;
      } else {
        // additive write, no removal term
        Var k_row = reshape(k_t, {1, qkv.dk});
        state[h] = add(mul(state[h], a_t), mul(matmul(v_col, k_row), b_t));
      }
      outputs[h].push_back(matmul(state[h], reshape(q_t, {qkv.dk, 1})));
    }
  }
}

ScanResult finish_scan(const QkvVars& qkv, std::vector<Var>& state,
                       std::vector<std::vector<Var>>& outputs) {
  std::vector<Var> per_head;
  per_head.reserve(qkv.heads);
  for (Index h = 0; h < qkv.heads; ++h) per_head.push_back(stack_rows(outputs[h]));
  ScanResult r;
  r.output = qkv.heads == 1 ? per_head[0] : concat_cols(per_head);
  r.final_state = state;
  return r;
}

std::vector<Var> init_state(const QkvVars& qkv, std::vector<Var> s0) {
  GradTape& t = *qkv.q.tape();
  if (s0.empty()) {
    for (Index h = 0; h < qkv.heads; ++h)
      s0.push_back(t.constant(Tensor::zeros({qkv.dv, qkv.dk})));
  }
  if (static_cast<Index>(s0.size()) != qkv.heads)
    throw ShapeError("scan: initial state count does not match head count");
  return s0;
}

void check_scan_shapes(const QkvVars& qkv, const GateVars& gates) {
  const Index n = qkv.q.value().rows();
  if (n < 1) throw ShapeError("scan: sequence length must be >= 1");
  if (qkv.k.value().rows() != n || qkv.v.value().rows() != n)
    throw ShapeError("scan: Q/K/V sequence lengths differ");
  if (qkv.q.value().cols() != qkv.heads * qkv.dk || qkv.k.value().cols() != qkv.heads * qkv.dk ||
      qkv.v.value().cols() != qkv.heads * qkv.dv)
    throw ShapeError("scan: Q/K/V widths inconsistent with head geometry");
  if (gates.alpha.value().rows() != n || gates.beta.value().rows() != n ||
      gates.alpha.value().cols() != qkv.heads || gates.beta.value().cols() != qkv.heads)
    throw ShapeError("scan: gate trace length/head mismatch with Q/K/V");
}

}  // namespace

ScanResult recurrent_scan(const QkvVars& qkv, GateVars gates, std::vector<Var> s0,
                          const ScanOptions& opts) {
  check_scan_shapes(qkv, gates);
  const Index n = qkv.q.value().rows();
  std::vector<Var> state = init_state(qkv, std::move(s0));
  std::vector<std::vector<Var>> outputs(qkv.heads);
  scan_tokens(qkv, qkv.q, qkv.k, qkv.v, gates.alpha, gates.beta, n, state, opts, outputs);
  return finish_scan(qkv, state, outputs);
}

ScanResult chunked_scan(const QkvVars& qkv, GateVars gates, Index chunk_size, std::vector<Var> s0,
                        const ScanOptions& opts) {
  if (chunk_size < 1) throw ConfigError("chunked_scan: chunk_size must be >= 1");
  check_scan_shapes(qkv, gates);
  const Index n = qkv.q.value().rows();
  std::vector<Var> state = init_state(qkv, std::move(s0));
  std::vector<std::vector<Var>> outputs(qkv.heads);
  for (Index start = 0; start < n; start += chunk_size) {
    const Index len = std::min(chunk_size, n - start);
    Var q_blk = slice_block(qkv.q, start, len, 0, qkv.q.value().cols());
    Var k_blk = slice_block(qkv.k, start, len, 0, qkv.k.value().cols());
    Var v_blk = slice_block(qkv.v, start, len, 0, qkv.v.value().cols());
    Var a_blk = slice_block(gates.alpha, start, len, 0, qkv.heads);
    Var b_blk = slice_block(gates.beta, start, len, 0, qkv.heads);
    scan_tokens(qkv, q_blk, k_blk, v_blk, a_blk, b_blk, len, state, opts, outputs);
  }
  return finish_scan(qkv, state, outputs);
}

Var normalize_keys(Var k_raw, Index heads) { return normalize_keys_impl(k_raw, heads, false); }

Var normalize_keys_allow_zero(Var k_raw, Index heads) {
  return normalize_keys_impl(k_raw, heads, true);
}

DeltaStepValues delta_step(const Tensor& s_prev, const Tensor& k, const Tensor& v, double alpha,
                           double beta) {
  GradTape t;
  auto r = delta_step(t.constant(s_prev), t.constant(k), t.constant(v),
                      t.constant(Tensor::scalar(alpha)), t.constant(Tensor::scalar(beta)));
  return {r.s_next.value(), r.v_old.value(), r.v_new.value()};
}

Tensor delta_step_compact(const Tensor& s_prev, const Tensor& k, const Tensor& v, double alpha,
                          double beta) {
  GradTape t;
  return delta_step_compact(t.constant(s_prev), t.constant(k), t.constant(v),
                            t.constant(Tensor::scalar(alpha)), t.constant(Tensor::scalar(beta)))
      .value();
}

}  // namespace deltamil
