#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "deltamil/block.hpp"

using namespace deltamil;

namespace {

Tensor random_tensor(std::vector<Index> shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  return (a.array() - b.array()).abs().maxCoeff();
}

BlockConfig small_config() {
  BlockConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.d_ff = 16;
  cfg.chunk_size = 3;
  cfg.dropout = 0.0;
  return cfg;
}

struct BlockFixture {
  BlockConfig cfg;
  ParamStore store;
  GridLayout layout;
  Tensor z0;
  Tensor pad0;

  explicit BlockFixture(std::uint64_t seed, Index n = 6) : cfg(small_config()) {
    std::mt19937_64 rng(seed);
    init_block_params(store, "blocks.0.", cfg, rng);
    store.add("pad_token", random_tensor({cfg.d}, rng, 0.3));
    std::vector<Coord> coords;
    const Index w = 3;
    for (Index i = 0; i < n; ++i) coords.push_back({i / w, i % w});
    layout = make_grid_layout(coords);
    z0 = random_tensor({n, cfg.d}, rng);
    pad0 = store.at("pad_token");
  }

  Tensor forward(bool train = false, std::uint64_t rng_seed = 0) const {
    GradTape t;
    BoundParams bound = bind(t, store, false);
    std::mt19937_64 rng(rng_seed);
    return block_forward(t.constant(z0), layout, bound, "blocks.0.", bound.at("pad_token"), cfg,
                         train, rng)
        .value();
  }
};

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat as_mat(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (Index i = 0; i < t.rows(); ++i)
    for (Index j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line transcription of the block equations with plain Eigen,
// independent of the tape path.
Mat oracle_block(const BlockFixture& fx) {
  const BlockConfig& cfg = fx.cfg;
  const Index n = fx.z0.rows(), d = cfg.d;
  auto P = [&](const std::string& name) { return as_mat(fx.store.at("blocks.0." + name)); };
  const Mat z = as_mat(fx.z0);

  auto rms = [&](const Mat& x, const Mat& gain) {
    Mat y = x;
    for (Index i = 0; i < x.rows(); ++i) {
      double ms = x.row(i).squaredNorm() / static_cast<double>(x.cols());
      y.row(i) = (x.row(i) / std::sqrt(ms + 1e-6)).cwiseProduct(gain.row(0));
    }
    return y;
  };

  Mat zn = rms(z, as_mat(fx.store.at("blocks.0.rms1.gain")));

  // 2D branch: scatter, depthwise 3x3 conv with pad outside, gather
  const Index H = fx.layout.height, W = fx.layout.width;
  const Vec pad = as_mat(fx.pad0).row(0).transpose();
  Mat grid(H * W, d);
  for (Index cell = 0; cell < H * W; ++cell) {
    Index p = fx.layout.patch_of_cell[cell];
    if (p >= 0)
      grid.row(cell) = zn.row(p);
    else
      grid.row(cell) = pad.transpose();
  }
  const Tensor& k2 = fx.store.at("blocks.0.attn.conv2d");
  Mat conv = Mat::Zero(H * W, d);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c)
      for (Index u = 0; u < 3; ++u)
        for (Index v = 0; v < 3; ++v) {
          Index rr = r + u - 1, cc = c + v - 1;
          for (Index ch = 0; ch < d; ++ch) {
            double x = (rr >= 0 && rr < H && cc >= 0 && cc < W) ? grid(rr * W + cc, ch) : pad[ch];
            conv(r * W + c, ch) += k2[ch * 9 + u * 3 + v] * x;
          }
        }
  Mat zl(n, d);
  for (Index i = 0; i < n; ++i) zl.row(i) = conv.row(fx.layout.cell_of_patch[i]);

  const double lambda = fx.store.at("blocks.0.attn.lambda")[0];
  Mat h = zn + std::tanh(lambda) * zl;

  auto conv1d = [&](const Mat& x, const Tensor& kern) {
    const Index w = kern.cols();
    Mat y = Mat::Zero(x.rows(), x.cols());
    for (Index t = 0; t < x.rows(); ++t)
      for (Index j = 0; j < w; ++j) {
        Index s = t - (w - 1) + j;
        if (s < 0) continue;
        for (Index ch = 0; ch < x.cols(); ++ch) y(t, ch) += kern.at(ch, j) * x(s, ch);
      }
    return y;
  };

  Mat q = conv1d(h * P("attn.wq"), fx.store.at("blocks.0.attn.phi_q"));
  Mat k = conv1d(h * P("attn.wk"), fx.store.at("blocks.0.attn.phi_k"));
  Mat v = conv1d(h * P("attn.wv"), fx.store.at("blocks.0.attn.phi_v"));
  const Index hd = cfg.head_dim;
  for (Index t = 0; t < n; ++t)
    for (Index hh = 0; hh < cfg.heads; ++hh) {
      double norm = k.row(t).segment(hh * hd, hd).norm();
      if (norm > 1e-12) k.row(t).segment(hh * hd, hd) /= norm;
    }

  Mat alpha(n, cfg.heads), beta(n, cfg.heads);
  {
    Mat sa = h * P("attn.w_alpha"), sb = h * P("attn.w_beta");
    Mat ba = as_mat(fx.store.at("blocks.0.attn.b_alpha"));
    Mat bb = as_mat(fx.store.at("blocks.0.attn.b_beta"));
    for (Index t = 0; t < n; ++t)
      for (Index hh = 0; hh < cfg.heads; ++hh) {
        alpha(t, hh) = sigm(sa(t, hh) + ba(0, hh));
        beta(t, hh) = sigm(sb(t, hh) + bb(0, hh));
      }
  }

  Mat hg(n, d);
  for (Index hh = 0; hh < cfg.heads; ++hh) {
    Mat S = Mat::Zero(hd, hd);
    for (Index t = 0; t < n; ++t) {
      Vec kt = k.row(t).segment(hh * hd, hd).transpose();
      Vec vt = v.row(t).segment(hh * hd, hd).transpose();
      Vec qt = q.row(t).segment(hh * hd, hd).transpose();
      const double a = alpha(t, hh), b = beta(t, hh);
      Vec v_old = a * (S * kt);
      Vec v_new = b * vt + (1.0 - b) * v_old;
      S = a * S - v_old * kt.transpose() + v_new * kt.transpose();
      hg.row(t).segment(hh * hd, hd) = (S * qt).transpose();
    }
  }

  Mat hl = h;  // overwritten below
  {
    Mat wl = P("attn.local_proj.w");
    Mat bl = as_mat(fx.store.at("blocks.0.attn.local_proj.b"));
    hl = zl * wl;
    for (Index t = 0; t < n; ++t) hl.row(t) += bl.row(0);
  }
  Mat gate = h * P("attn.w_g");
  {
    Mat bg = as_mat(fx.store.at("blocks.0.attn.b_g"));
    for (Index t = 0; t < n; ++t)
      for (Index j = 0; j < d; ++j) gate(t, j) = sigm(gate(t, j) + bg(0, j));
  }
  Mat fused = gate.cwiseProduct(hg) + (Mat::Ones(n, d) - gate).cwiseProduct(hl);
  Mat attn_out = fused * P("attn.out.w");
  {
    Mat bo = as_mat(fx.store.at("blocks.0.attn.out.b"));
    for (Index t = 0; t < n; ++t) attn_out.row(t) += bo.row(0);
  }

  Mat u = z + attn_out;
  Mat un = rms(u, as_mat(fx.store.at("blocks.0.rms2.gain")));
  Mat gate_path = un * P("mlp.w1");
  for (Index i = 0; i < gate_path.rows(); ++i)
    for (Index j = 0; j < gate_path.cols(); ++j)
      gate_path(i, j) = gate_path(i, j) * sigm(gate_path(i, j));
  Mat mlp = gate_path.cwiseProduct(un * P("mlp.w3")) * P("mlp.w2");
  return u + mlp;
}

}  // namespace

TEST_CASE("rms_norm worked values") {
  GradTape t;
  // all zeros stay zero
  Var zeros = t.constant(Tensor::zeros({2, 3}));
  Var gain3 = t.constant(Tensor::full({3}, 1.0));
  CHECK(rms_norm(zeros, gain3, 1e-6).value().array().abs().maxCoeff() == 0.0);

  // constant vector approaches sign(c) for |c| >> eps
  Var c = t.constant(Tensor::full({1, 4}, -3.0));
  Var gain4 = t.constant(Tensor::full({4}, 1.0));
  Tensor y = rms_norm(c, gain4, 1e-6).value();
  for (Index i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(-1.0).epsilon(1e-7));

  // (3,4), gain 1, eps 0: rms = sqrt(12.5)
  Tensor out = rms_norm(Tensor::from({1, 2}, {3.0, 4.0}), Tensor::full({2}, 1.0), 0.0);
  CHECK(out[0] == doctest::Approx(0.8485281374238570).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(1.1313708498984760).epsilon(1e-12));
}

TEST_CASE("gated_mlp worked values") {
  GradTape t;
  const Index d = 3, ff = 5;
  std::mt19937_64 rng(1);
  Var w1 = t.constant(random_tensor({d, ff}, rng));
  Var w3 = t.constant(random_tensor({d, ff}, rng));
  Var w2 = t.constant(random_tensor({ff, d}, rng));

  CHECK(gated_mlp(t.constant(Tensor::zeros({2, d})), w1, w3, w2).value().array().abs().maxCoeff() ==
        0.0);
  CHECK(gated_mlp(t.constant(random_tensor({2, d}, rng)), w1,
                  t.constant(Tensor::zeros({d, ff})), w2)
            .value()
            .array()
            .abs()
            .maxCoeff() == 0.0);

  Var one = t.constant(Tensor::full({1, 1}, 1.0));
  Var w = t.constant(Tensor::full({1, 1}, 1.0));
  CHECK(gated_mlp(one, w, w, w).value().value() ==
        doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("zero-weight block is an exact identity") {
  BlockFixture fx(2);
  fx.store.set_all_zero();
  Tensor out = fx.forward();
  CHECK(max_abs_diff(out, fx.z0) == 0.0);
}

TEST_CASE("dropout off at eval equals rate zero in training") {
  BlockFixture fx(3);
  Tensor eval_out = fx.forward(false);
  Tensor train_out = fx.forward(true, 99);  // dropout 0 in config
  CHECK(max_abs_diff(eval_out, train_out) == 0.0);
}

TEST_CASE("inference is deterministic") {
  BlockFixture fx(4);
  CHECK(max_abs_diff(fx.forward(), fx.forward()) == 0.0);
}

TEST_CASE("block_forward matches the independent transcription oracle") {
  BlockFixture fx(5);
  Mat expect = oracle_block(fx);
  Tensor got = fx.forward();
  double worst = 0.0;
  for (Index i = 0; i < got.rows(); ++i)
    for (Index j = 0; j < got.cols(); ++j)
      worst = std::max(worst, std::abs(got.at(i, j) - expect(i, j)));
  CHECK(worst < 1e-11);
}

TEST_CASE("local branch is exactly silent at init (lambda 0, zero local projection)") {
  std::mt19937_64 rng(6);
  BlockConfig cfg = small_config();
  ParamStore store;
  init_block_params(store, "blocks.0.", cfg, rng);
  store.add("pad_token", Tensor::zeros({cfg.d}));
  REQUIRE(store.at("blocks.0.attn.lambda")[0] == 0.0);
  REQUIRE(store.at("blocks.0.attn.local_proj.w").array().abs().maxCoeff() == 0.0);

  std::vector<Coord> coords = {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}};
  GridLayout layout = make_grid_layout(coords);
  Tensor z0 = random_tensor({5, cfg.d}, rng);

  auto run = [&](bool use_local) {
    BlockConfig c = cfg;
    c.use_local = use_local;
    GradTape t;
    BoundParams bound = bind(t, store, false);
    std::mt19937_64 r(0);
    return block_forward(t.constant(z0), layout, bound, "blocks.0.", bound.at("pad_token"), c,
                         false, r)
        .value();
  };

  CHECK(max_abs_diff(run(true), run(false)) == 0.0);  // bit-exact
}

TEST_CASE("gated-off trace records alpha identically one") {
  BlockFixture fx(7);
  BlockConfig cfg = fx.cfg;
  cfg.use_gated = false;
  GradTape t;
  BoundParams bound = bind(t, fx.store, false);
  std::mt19937_64 rng(0);
  BlockTrace trace;
  block_forward(t.constant(fx.z0), fx.layout, bound, "blocks.0.", bound.at("pad_token"), cfg,
                false, rng, &trace);
  for (Index i = 0; i < trace.gates.alpha.size(); ++i) CHECK(trace.gates.alpha[i] == 1.0);
  for (Index i = 0; i < trace.gates.beta.size(); ++i) {
    CHECK(trace.gates.beta[i] > 0.0);
    CHECK(trace.gates.beta[i] < 1.0);
  }
}

TEST_CASE("stack_forward composes blocks") {
  std::mt19937_64 rng(8);
  BlockConfig cfg = small_config();
  ParamStore store;
  init_block_params(store, "blocks.0.", cfg, rng);
  init_block_params(store, "blocks.1.", cfg, rng);
  init_block_params(store, "blocks.2.", cfg, rng);
  store.add("pad_token", random_tensor({cfg.d}, rng, 0.3));
  std::vector<Coord> coords = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  GridLayout layout = make_grid_layout(coords);
  Tensor z0 = random_tensor({4, cfg.d}, rng);

  auto stack = [&](Index layers) {
    GradTape t;
    BoundParams bound = bind(t, store, false);
    std::mt19937_64 r(0);
    return stack_forward(t.constant(z0), layout, bound, bound.at("pad_token"), cfg, layers, false,
                         r)
        .value();
  };
  auto manual = [&](Index layers) {
    GradTape t;
    BoundParams bound = bind(t, store, false);
    std::mt19937_64 r(0);
    Var x = t.constant(z0);
    for (Index l = 0; l < layers; ++l)
      x = block_forward(x, layout, bound, "blocks." + std::to_string(l) + ".",
                        bound.at("pad_token"), cfg, false, r);
    return x.value();
  };

  // L=1 equals a single block_forward
  CHECK(max_abs_diff(stack(1), manual(1)) == 0.0);
  // L=3 equals the manual triple composition
  CHECK(max_abs_diff(stack(3), manual(3)) == 0.0);

  // a zeroed second block leaves the L=1 output unchanged
  ParamStore saved = store;
  for (const std::string& name : store.names())
    if (name.rfind("blocks.1.", 0) == 0) store.at(name).set_zero();
  CHECK(max_abs_diff(stack(2), stack(1)) == 0.0);
  store = saved;

  CHECK_THROWS_AS(stack(0), ConfigError);
}

TEST_CASE("dropout expectation matches the plain forward within 1 percent") {
  GradTape t;
  std::mt19937_64 rng(9);
  Var x = t.constant(Tensor::scalar(1.0));
  const double rate = 0.3;
  double sum = 0.0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) sum += dropout(x, rate, rng, true).value().value();
  CHECK(std::abs(sum / trials - 1.0) < 0.01);
}

TEST_CASE("gradient through one full block matches finite differences") {
  BlockFixture fx(10, /*n=*/8);

  auto loss_of = [&](const ParamStore& store) {
    GradTape t;
    BoundParams bound = bind(t, store, false);
    std::mt19937_64 r(0);
    Var out = block_forward(t.constant(fx.z0), fx.layout, bound, "blocks.0.",
                            bound.at("pad_token"), fx.cfg, false, r);
    return sum(mul(out, out)).value().value();
  };

  std::map<std::string, Tensor> grads;
  {
    GradTape t;
    BoundParams bound = bind(t, fx.store, true);
    std::mt19937_64 r(0);
    Var out = block_forward(t.constant(fx.z0), fx.layout, bound, "blocks.0.",
                            bound.at("pad_token"), fx.cfg, false, r);
    t.backward(sum(mul(out, out)));
    grads = collect_grads(bound);
  }

  ParamStore work = fx.store;
  double worst = 0.0;
  for (const std::string& name : fx.store.names()) {
    auto f = [&](const std::vector<Tensor>& ps) {
      work.at(name) = ps[0];
      return loss_of(work);
    };
    worst = std::max(worst,
                     finite_diff_check(f, {fx.store.at(name)}, {grads.at(name)}, 1e-5));
    work.at(name) = fx.store.at(name);
  }
  CHECK(worst < 1e-4);
}
