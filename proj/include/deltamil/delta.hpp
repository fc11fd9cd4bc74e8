// Gated delta-rule memory: gate computation, the remove-old / write-new
// update, token readout, and sequential/chunked scans over a patch sequence.
//
// The memory S maps keys to values (S * k is a value vector), one matrix per
// head. Keys are expected L2-normalized; a key with norm <= 1e-12 is accepted
// as an exact no-op write (needed so all-zero projections stay well defined).
#pragma once

#include <optional>
#include <vector>

#include "deltamil/tape.hpp"

namespace deltamil {

// Recorded gate values for inspection; one row per token, one column per head.
struct GateTrace {
  Tensor alpha;                   // [N x heads], retention gate
  Tensor beta;                    // [N x heads], update gate
  std::optional<Tensor> fusion;   // [N x d], output fusion gate G
};

struct GateVars {
  Var alpha;  // [N x heads]
  Var beta;   // [N x heads]
};

// alpha = sigma(H W_alpha + b_alpha), beta likewise; one scalar pair per
// token per head.
GateVars compute_gates(Var h, Var w_alpha, Var w_beta, Var b_alpha, Var b_beta);
GateTrace record_trace(const GateVars& gates);

struct QkvVars {
  Var q;  // [N x heads*dk]
  Var k;  // [N x heads*dk], rows L2-normalized per head segment
  Var v;  // [N x heads*dv]
  Index heads = 1;
  Index dk = 1;
  Index dv = 1;
};

struct DeltaStepResult {
  Var s_next;  // [dv x dk]
  Var v_old;   // [dv x 1]
  Var v_new;   // [dv x 1]
};

// Three-step update: v_old = a S k; v_new = b v + (1-b) v_old;
// S' = a S - v_old k^T + v_new k^T. k, v are column vectors; gates scalars.
DeltaStepResult delta_step(Var s_prev, Var k, Var v, Var alpha, Var beta);

// One-line form S' = S (a (I - b k k^T)) + b v k^T, algebraically identical
// to delta_step for unit keys (the gate factor acts on the key side).
Var delta_step_compact(Var s_prev, Var k, Var v, Var alpha, Var beta);

struct ScanOptions {
  bool delta_removal = true;  // false: S' = a S + b v k^T (ablation "delta off")
};

struct ScanResult {
  Var output;                    // [N x heads*dv], o_t = S_t q_t (post-update)
  std::vector<Var> final_state;  // per head [dv x dk]
};

ScanResult recurrent_scan(const QkvVars& qkv, GateVars gates, std::vector<Var> s0 = {},
                          const ScanOptions& opts = {});

// Blocked iteration carrying the memory across chunk boundaries; equal to
// recurrent_scan for every chunk size.
ScanResult chunked_scan(const QkvVars& qkv, GateVars gates, Index chunk_size,
                        std::vector<Var> s0 = {}, const ScanOptions& opts = {});

// Divide each per-head key row segment by its L2 norm. Errors on a zero-norm
// row, reporting the token index.
Var normalize_keys(Var k_raw, Index heads);
// Module-internal variant: zero rows pass through unchanged (no-op writes).
Var normalize_keys_allow_zero(Var k_raw, Index heads);

// Value-level wrappers (run the same code on a throwaway tape).
struct DeltaStepValues {
  Tensor s_next, v_old, v_new;
};
DeltaStepValues delta_step(const Tensor& s_prev, const Tensor& k, const Tensor& v, double alpha,
                           double beta);
Tensor delta_step_compact(const Tensor& s_prev, const Tensor& k, const Tensor& v, double alpha,
                          double beta);

}  // namespace deltamil
