#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "deltamil/delta.hpp"

using namespace deltamil;

namespace {

Tensor random_tensor(std::vector<Index> shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

Tensor random_unit(Index n, std::mt19937_64& rng) {
  Tensor k = random_tensor({n, 1}, rng);
  double norm = std::sqrt(k.array().square().sum());
  k.array() /= norm;
  return k;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  return (a.array() - b.array()).abs().maxCoeff();
}

// Scalar-loop transcription of the three update equations, no matrix calls.
struct StepOracle {
  std::vector<double> v_old, v_new;
  std::vector<std::vector<double>> s_next;
};
StepOracle step_oracle(const Tensor& s, const Tensor& k, const Tensor& v, double alpha,
                       double beta) {
  const Index dv = s.rows(), dk = s.cols();
  StepOracle o;
  o.v_old.assign(dv, 0.0);
  for (Index i = 0; i < dv; ++i) {
    for (Index j = 0; j < dk; ++j) o.v_old[i] += s.at(i, j) * k[j];
    o.v_old[i] *= alpha;
  }
  o.v_new.assign(dv, 0.0);
  for (Index i = 0; i < dv; ++i) o.v_new[i] = beta * v[i] + (1.0 - beta) * o.v_old[i];
  o.s_next.assign(dv, std::vector<double>(dk, 0.0));
  for (Index i = 0; i < dv; ++i)
    for (Index j = 0; j < dk; ++j)
      o.s_next[i][j] = alpha * s.at(i, j) - o.v_old[i] * k[j] + o.v_new[i] * k[j];
  return o;
}

}  // namespace

TEST_CASE("compute_gates zero weights give 0.5, bias saturates") {
  GradTape t;
  Var h = t.constant(Tensor::from({2, 2}, {1.0, -1.0, 0.3, 0.7}));
  Var w0 = t.constant(Tensor::zeros({2, 1}));
  Var b0 = t.constant(Tensor::zeros({1}));
  GateVars g = compute_gates(h, w0, w0, b0, b0);
  for (Index i = 0; i < g.alpha.value().size(); ++i) {
    CHECK(g.alpha.value()[i] == 0.5);
    CHECK(g.beta.value()[i] == 0.5);
  }

  Var b20 = t.constant(Tensor::from({1}, {20.0}));
  GateVars sat = compute_gates(h, w0, w0, b20, b0);
  for (Index i = 0; i < sat.alpha.value().size(); ++i) CHECK(sat.alpha.value()[i] > 1.0 - 1e-8);
}

TEST_CASE("compute_gates scalar sigmoid evaluation") {
  GradTape t;
  Var h = t.constant(Tensor::from({1, 2}, {1.0, -1.0}));
  Var w_beta = t.constant(Tensor::from({2, 1}, {0.3, 0.1}));
  Var w_alpha = t.constant(Tensor::zeros({2, 1}));
  Var b = t.constant(Tensor::zeros({1}));
  GateVars g = compute_gates(h, w_alpha, w_beta, b, b);
  CHECK(g.beta.value()[0] == doctest::Approx(0.54983399731247).epsilon(1e-12));
  GateTrace trace = record_trace(g);
  CHECK(trace.alpha.size() == 1);
  CHECK(trace.beta[0] > 0.0);
  CHECK(trace.beta[0] < 1.0);
}

TEST_CASE("delta_step pure replacement at alpha=beta=1") {
  std::mt19937_64 rng(3);
  Tensor s = random_tensor({4, 3}, rng);
  Tensor k = random_unit(3, rng);
  Tensor v = random_tensor({4, 1}, rng);
  DeltaStepValues r = delta_step(s, k, v, 1.0, 1.0);
  // read-after-write: S' k = v
  Tensor read = matmul(r.s_next, k);
  CHECK(max_abs_diff(read, v) < 1e-12);
}

TEST_CASE("delta_step total forgetting at alpha=0") {
  std::mt19937_64 rng(4);
  Tensor s = random_tensor({3, 3}, rng);
  Tensor k = random_unit(3, rng);
  Tensor v = random_tensor({3, 1}, rng);
  const double beta = 0.7;
  DeltaStepValues r = delta_step(s, k, v, 0.0, beta);
  Tensor expect = matmul(v, transpose(k));
  expect.array() *= beta;
  CHECK(max_abs_diff(r.s_next, expect) < 1e-15);
}

TEST_CASE("delta_step beta=0 is pure decay") {
  std::mt19937_64 rng(5);
  Tensor s = random_tensor({3, 4}, rng);
  Tensor k = random_unit(4, rng);
  Tensor v = random_tensor({3, 1}, rng);
  const double alpha = 0.42;
  DeltaStepValues r = delta_step(s, k, v, alpha, 0.0);
  Tensor expect = s;
  expect.array() *= alpha;
  // v_new = v_old so the subtract/add terms cancel exactly
  CHECK(max_abs_diff(r.s_next, expect) < 1e-15);
  CHECK(max_abs_diff(r.v_new, r.v_old) == 0.0);
}

TEST_CASE("delta_step matches the scalar-loop oracle") {
  Tensor s = Tensor::from({3, 2}, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5});
  Tensor k = Tensor::from({2, 1}, {1.0, 0.0});
  Tensor v = Tensor::from({3, 1}, {0.2, -0.4, 0.6});
  DeltaStepValues got = delta_step(s, k, v, 0.5, 0.25);
  StepOracle expect = step_oracle(s, k, v, 0.5, 0.25);
  for (Index i = 0; i < 3; ++i) {
    CHECK(got.v_old[i] == doctest::Approx(expect.v_old[i]).epsilon(1e-14));
    CHECK(got.v_new[i] == doctest::Approx(expect.v_new[i]).epsilon(1e-14));
    for (Index j = 0; j < 2; ++j)
      CHECK(got.s_next.at(i, j) == doctest::Approx(expect.s_next[i][j]).epsilon(1e-14));
  }
}

TEST_CASE("delta_step rejects non-unit keys, accepts exact-zero keys") {
  std::mt19937_64 rng(6);
  Tensor s = random_tensor({2, 2}, rng);
  Tensor v = random_tensor({2, 1}, rng);
  Tensor bad = Tensor::from({2, 1}, {0.9, 0.0});
  CHECK_THROWS_AS(delta_step(s, bad, v, 0.5, 0.5), ValueError);
  // zero key: well-defined no-op write
  Tensor zero = Tensor::zeros({2, 1});
  DeltaStepValues r = delta_step(s, zero, v, 0.5, 0.5);
  Tensor expect = s;
  expect.array() *= 0.5;
  CHECK(max_abs_diff(r.s_next, expect) == 0.0);
}

TEST_CASE("compact form equals the three-step form on random trials") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index dv = 1 + static_cast<Index>(rng() % 6);
    const Index dk = 1 + static_cast<Index>(rng() % 6);
    Tensor s = random_tensor({dv, dk}, rng, 2.0);
    Tensor k = random_unit(dk, rng);
    Tensor v = random_tensor({dv, 1}, rng, 2.0);
    const double alpha = unit(rng), beta = unit(rng);
    DeltaStepValues a = delta_step(s, k, v, alpha, beta);
    Tensor b = delta_step_compact(s, k, v, alpha, beta);
    worst = std::max(worst, max_abs_diff(a.s_next, b));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("compact form beta=0 and rank-1 replacement") {
  std::mt19937_64 rng(8);
  Tensor s = random_tensor({3, 3}, rng);
  Tensor k = random_unit(3, rng);
  Tensor v = random_tensor({3, 1}, rng);
  Tensor decay = delta_step_compact(s, k, v, 0.37, 0.0);
  Tensor expect = s;
  expect.array() *= 0.37;
  CHECK(max_abs_diff(decay, expect) < 1e-15);

  // S_prev = v0 k^T for the same unit k; alpha = beta = 1 -> S_next = v k^T
  Tensor v0 = random_tensor({3, 1}, rng);
  Tensor s_rank1 = matmul(v0, transpose(k));
  Tensor got = delta_step_compact(s_rank1, k, v, 1.0, 1.0);
  Tensor want = matmul(v, transpose(k));
  CHECK(max_abs_diff(got, want) < 1e-12);
}

namespace {

// Naive dense re-implementation of the whole scan for one head, raw loops.
std::vector<std::vector<double>> naive_scan(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Tensor& alpha, const Tensor& beta, Index dk,
                                            Index dv) {
  const Index n = q.rows();
  std::vector<std::vector<double>> s(dv, std::vector<double>(dk, 0.0));
  std::vector<std::vector<double>> outs;
  for (Index t = 0; t < n; ++t) {
    const double a = alpha[t], b = beta[t];
    std::vector<double> v_old(dv, 0.0);
    for (Index i = 0; i < dv; ++i) {
      for (Index j = 0; j < dk; ++j) v_old[i] += s[i][j] * k.at(t, j);
      v_old[i] *= a;
    }
    std::vector<double> v_new(dv);
    for (Index i = 0; i < dv; ++i) v_new[i] = b * v.at(t, i) + (1.0 - b) * v_old[i];
    for (Index i = 0; i < dv; ++i)
      for (Index j = 0; j < dk; ++j)
        s[i][j] = a * s[i][j] - v_old[i] * k.at(t, j) + v_new[i] * k.at(t, j);
    std::vector<double> o(dv, 0.0);
    for (Index i = 0; i < dv; ++i)
      for (Index j = 0; j < dk; ++j) o[i] += s[i][j] * q.at(t, j);
    outs.push_back(o);
  }
  return outs;
}

struct ScanInputs {
  Tensor q, k, v, alpha, beta;
};

ScanInputs make_inputs(Index n, Index heads, Index dk, Index dv, std::mt19937_64& rng) {
  ScanInputs in;
  in.q = random_tensor({n, heads * dk}, rng);
  in.k = random_tensor({n, heads * dk}, rng);
  // normalize per head segment
  for (Index t = 0; t < n; ++t)
    for (Index h = 0; h < heads; ++h) {
      auto seg = in.k.mat().row(t).segment(h * dk, dk);
      seg /= seg.norm();
    }
  in.v = random_tensor({n, heads * dv}, rng);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  in.alpha = Tensor::zeros({n, heads});
  in.beta = Tensor::zeros({n, heads});
  for (Index i = 0; i < in.alpha.size(); ++i) {
    in.alpha[i] = u(rng);
    in.beta[i] = u(rng);
  }
  return in;
}

ScanResult run_scan(GradTape& t, const ScanInputs& in, Index heads, Index dk, Index dv,
                    Index chunk = 0) {
  QkvVars qkv;
  qkv.q = t.constant(in.q);
  qkv.k = t.constant(in.k);
  qkv.v = t.constant(in.v);
  qkv.heads = heads;
  qkv.dk = dk;
  qkv.dv = dv;
  GateVars gates{t.constant(in.alpha), t.constant(in.beta)};
  if (chunk > 0) return chunked_scan(qkv, gates, chunk);
  return recurrent_scan(qkv, gates);
}

}  // namespace

TEST_CASE("recurrent_scan single step unrolling") {
  GradTape t;
  std::mt19937_64 rng(9);
  const Index dk = 3, dv = 3;
  Tensor k = transpose(random_unit(dk, rng));
  Tensor q = random_tensor({1, dk}, rng);
  Tensor v = random_tensor({1, dv}, rng);
  QkvVars qkv{t.constant(q), t.constant(k), t.constant(v), 1, dk, dv};
  GateVars gates{t.constant(Tensor::full({1, 1}, 1.0)), t.constant(Tensor::full({1, 1}, 1.0))};
  ScanResult r = recurrent_scan(qkv, gates);
  // o_1 = (v k^T) q = v (k . q)
  double kq = 0.0;
  for (Index j = 0; j < dk; ++j) kq += k[j] * q[j];
  for (Index i = 0; i < dv; ++i)
    CHECK(r.output.value()[i] == doctest::Approx(v[i] * kq).epsilon(1e-13));
}

TEST_CASE("recurrent_scan with all beta zero writes nothing") {
  std::mt19937_64 rng(10);
  ScanInputs in = make_inputs(6, 2, 3, 3, rng);
  in.beta.set_zero();
  GradTape t;
  ScanResult r = run_scan(t, in, 2, 3, 3);
  CHECK(r.output.value().array().abs().maxCoeff() == 0.0);
}

TEST_CASE("recurrent_scan matches the naive dense-loop oracle") {
  std::mt19937_64 rng(11);
  const Index n = 5, heads = 2, dk = 3, dv = 4;
  ScanInputs in = make_inputs(n, heads, dk, dv, rng);
  GradTape t;
  ScanResult r = run_scan(t, in, heads, dk, dv);
  for (Index h = 0; h < heads; ++h) {
    Tensor qh = Tensor::zeros({n, dk}), kh = Tensor::zeros({n, dk}), vh = Tensor::zeros({n, dv});
    Tensor ah = Tensor::zeros({n}), bh = Tensor::zeros({n});
    for (Index tt = 0; tt < n; ++tt) {
      for (Index j = 0; j < dk; ++j) {
        qh.at(tt, j) = in.q.at(tt, h * dk + j);
        kh.at(tt, j) = in.k.at(tt, h * dk + j);
      }
      for (Index j = 0; j < dv; ++j) vh.at(tt, j) = in.v.at(tt, h * dv + j);
      ah[tt] = in.alpha.at(tt, h);
      bh[tt] = in.beta.at(tt, h);
    }
    auto oracle = naive_scan(qh, kh, vh, ah, bh, dk, dv);
    for (Index tt = 0; tt < n; ++tt)
      for (Index i = 0; i < dv; ++i)
        CHECK(r.output.value().at(tt, h * dv + i) ==
              doctest::Approx(oracle[tt][i]).epsilon(1e-12));
  }
}

TEST_CASE("chunked_scan equals recurrent_scan for every chunk size") {
  std::mt19937_64 rng(12);
  const Index n = 100, heads = 2, dk = 4, dv = 4;
  ScanInputs in = make_inputs(n, heads, dk, dv, rng);
  GradTape t0;
  Tensor reference = run_scan(t0, in, heads, dk, dv).output.value();

  for (Index chunk : {Index{1}, Index{4}, Index{16}, Index{64}, Index{101}}) {
    GradTape t;
    Tensor got = run_scan(t, in, heads, dk, dv, chunk).output.value();
    CHECK(max_abs_diff(got, reference) < 1e-10);
    if (chunk == 1) CHECK(max_abs_diff(got, reference) == 0.0);  // bit-identical
  }
}

TEST_CASE("chunked_scan rejects bad chunk size and mismatched gates") {
  std::mt19937_64 rng(13);
  ScanInputs in = make_inputs(4, 1, 3, 3, rng);
  GradTape t;
  QkvVars qkv{t.constant(in.q), t.constant(in.k), t.constant(in.v), 1, 3, 3};
  GateVars gates{t.constant(in.alpha), t.constant(in.beta)};
  CHECK_THROWS_AS(chunked_scan(qkv, gates, 0), ConfigError);
  GateVars bad{t.constant(Tensor::zeros({3, 1})), t.constant(Tensor::zeros({3, 1}))};
  CHECK_THROWS_AS(recurrent_scan(qkv, bad), ShapeError);
}

TEST_CASE("state carry is associative: split scan equals full scan exactly") {
  std::mt19937_64 rng(14);
  const Index n = 12, heads = 1, dk = 3, dv = 3, m = 5;
  ScanInputs in = make_inputs(n, heads, dk, dv, rng);
  GradTape t;
  ScanResult full = run_scan(t, in, heads, dk, dv);

  auto slice_inputs = [&](Index start, Index len) {
    ScanInputs s;
    s.q = Tensor::zeros({len, dk});
    s.k = Tensor::zeros({len, dk});
    s.v = Tensor::zeros({len, dv});
    s.alpha = Tensor::zeros({len, 1});
    s.beta = Tensor::zeros({len, 1});
    for (Index i = 0; i < len; ++i) {
      s.q.mat().row(i) = in.q.mat().row(start + i);
      s.k.mat().row(i) = in.k.mat().row(start + i);
      s.v.mat().row(i) = in.v.mat().row(start + i);
      s.alpha.at(i, 0) = in.alpha.at(start + i, 0);
      s.beta.at(i, 0) = in.beta.at(start + i, 0);
    }
    return s;
  };

  ScanInputs first = slice_inputs(0, m), second = slice_inputs(m, n - m);
  GradTape t2;
  QkvVars qkv1{t2.constant(first.q), t2.constant(first.k), t2.constant(first.v), 1, dk, dv};
  GateVars g1{t2.constant(first.alpha), t2.constant(first.beta)};
  ScanResult part1 = recurrent_scan(qkv1, g1);
  QkvVars qkv2{t2.constant(second.q), t2.constant(second.k), t2.constant(second.v), 1, dk, dv};
  GateVars g2{t2.constant(second.alpha), t2.constant(second.beta)};
  ScanResult part2 = recurrent_scan(qkv2, g2, part1.final_state);

  CHECK(max_abs_diff(part2.final_state[0].value(), full.final_state[0].value()) == 0.0);
  for (Index i = 0; i < n - m; ++i)
    for (Index j = 0; j < dv; ++j)
      CHECK(part2.output.value().at(i, j) == full.output.value().at(m + i, j));
}

TEST_CASE("forgetting bound with zero values") {
  std::mt19937_64 rng(15);
  const Index n = 10, dk = 4, dv = 4;
  ScanInputs in = make_inputs(n, 1, dk, dv, rng);
  in.v.set_zero();
  Tensor s0 = random_tensor({dv, dk}, rng);
  GradTape t;
  QkvVars qkv{t.constant(in.q), t.constant(in.k), t.constant(in.v), 1, dk, dv};
  GateVars gates{t.constant(in.alpha), t.constant(in.beta)};
  ScanResult r = recurrent_scan(qkv, gates, {t.constant(s0)});
  double alpha_prod = 1.0;
  for (Index tt = 0; tt < n; ++tt) alpha_prod *= in.alpha.at(tt, 0);
  const double s0_norm = std::sqrt(s0.array().square().sum());
  const double sn_norm = std::sqrt(r.final_state[0].value().array().square().sum());
  CHECK(sn_norm <= alpha_prod * s0_norm + 1e-12);
}

TEST_CASE("zero init and zero beta keep the memory at zero") {
  std::mt19937_64 rng(16);
  ScanInputs in = make_inputs(8, 1, 3, 3, rng);
  in.beta.set_zero();
  GradTape t;
  ScanResult r = run_scan(t, in, 1, 3, 3);
  CHECK(r.final_state[0].value().array().abs().maxCoeff() == 0.0);
}

TEST_CASE("normalize_keys worked examples and error") {
  GradTape t;
  Var k = t.constant(Tensor::from({1, 2}, {3.0, 4.0}));
  Tensor out = normalize_keys(k, 1).value();
  CHECK(out[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(0.8).epsilon(1e-15));

  Var unit = t.constant(Tensor::from({1, 2}, {1.0, 0.0}));
  CHECK(max_abs_diff(normalize_keys(unit, 1).value(), unit.value()) == 0.0);

  std::mt19937_64 rng(17);
  Var big = t.constant(random_tensor({5, 8}, rng));
  Tensor normed = normalize_keys(big, 2).value();
  for (Index i = 0; i < 5; ++i)
    for (Index h = 0; h < 2; ++h) {
      double norm = normed.mat().row(i).segment(h * 4, 4).norm();
      CHECK(std::abs(norm - 1.0) < 1e-12);
    }

  Tensor with_zero = random_tensor({3, 4}, rng);
  with_zero.mat().row(1).setZero();
  try {
    normalize_keys(t.constant(with_zero), 1);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("token 1") != std::string::npos);
  }
  // the module-internal variant passes zero rows through
  Tensor safe = normalize_keys_allow_zero(t.constant(with_zero), 1).value();
  CHECK(safe.mat().row(1).norm() == 0.0);
}

TEST_CASE("gradient through a length-16 scan matches finite differences") {
  std::mt19937_64 rng(18);
  const Index n = 16, heads = 1, dk = 3, dv = 3;
  Tensor q0 = random_tensor({n, dk}, rng, 0.5);
  Tensor k_raw0 = random_tensor({n, dk}, rng);
  Tensor v0 = random_tensor({n, dv}, rng, 0.5);
  Tensor a0 = random_tensor({n, heads}, rng, 0.4);
  Tensor b0 = random_tensor({n, heads}, rng, 0.4);

  auto build = [&](GradTape& t, Var q, Var k_raw, Var v, Var ga, Var gb) {
    QkvVars qkv{q, normalize_keys(k_raw, heads), v, heads, dk, dv};
    GateVars gates{sigmoid(ga), sigmoid(gb)};
    ScanResult r = chunked_scan(qkv, gates, 5);
    return sum(mul(r.output, r.output));
  };

  auto f = [&](const std::vector<Tensor>& ps) {
    GradTape t;
    return build(t, t.constant(ps[0]), t.constant(ps[1]), t.constant(ps[2]), t.constant(ps[3]),
                 t.constant(ps[4]))
        .value()
        .value();
  };

  GradTape t;
  Var q = t.leaf(q0), k_raw = t.leaf(k_raw0), v = t.leaf(v0), ga = t.leaf(a0), gb = t.leaf(b0);
  t.backward(build(t, q, k_raw, v, ga, gb));

  double rel = finite_diff_check(
      f, {q0, k_raw0, v0, a0, b0},
      {q.grad(), k_raw.grad(), v.grad(), ga.grad(), gb.grad()}, 1e-5);
  CHECK(rel < 1e-4);
}

TEST_CASE("delta-off scan is a pure additive write") {
  std::mt19937_64 rng(19);
  const Index n = 4, dk = 3, dv = 3;
  ScanInputs in = make_inputs(n, 1, dk, dv, rng);
  GradTape t;
  QkvVars qkv{t.constant(in.q), t.constant(in.k), t.constant(in.v), 1, dk, dv};
  GateVars gates{t.constant(in.alpha), t.constant(in.beta)};
  ScanOptions opts;
  opts.delta_removal = false;
  ScanResult r = recurrent_scan(qkv, gates, {}, opts);

  // oracle: S_t = a_t S_{t-1} + b_t v_t k_t^T
  std::vector<std::vector<double>> s(dv, std::vector<double>(dk, 0.0));
  for (Index tt = 0; tt < n; ++tt) {
    const double a = in.alpha.at(tt, 0), b = in.beta.at(tt, 0);
    for (Index i = 0; i < dv; ++i)
      for (Index j = 0; j < dk; ++j)
        s[i][j] = a * s[i][j] + b * in.v.at(tt, i) * in.k.at(tt, j);
    std::vector<double> o(dv, 0.0);
    for (Index i = 0; i < dv; ++i)
      for (Index j = 0; j < dk; ++j) o[i] += s[i][j] * in.q.at(tt, j);
    for (Index i = 0; i < dv; ++i)
      CHECK(r.output.value().at(tt, i) == doctest::Approx(o[i]).epsilon(1e-12));
  }
}
