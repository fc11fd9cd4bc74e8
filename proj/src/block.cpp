#include "deltamil/block.hpp"

namespace deltamil {

Var rms_norm(Var x, Var gain, double eps) {
  if (eps < 0.0) throw ConfigError("rms_norm: eps must be non-negative");
  Var inv_rms = pow_scalar(add_scalar(row_mean(mul(x, x)), eps), -0.5);  // [N]
  return mul_rowvec(mul_colvec(x, inv_rms), gain);
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  GradTape t;
  return rms_norm(t.constant(x), t.constant(gain), eps).value();
}

Var gated_mlp(Var x, Var w1, Var w3, Var w2) {
  return matmul(mul(silu(matmul(x, w1)), matmul(x, w3)), w2);
}

namespace {

// Identity tap (current position / kernel center) plus small noise.
Tensor near_identity_conv1d(Index channels, Index w, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  Tensor k = Tensor::zeros({channels, w});
  for (Index ch = 0; ch < channels; ++ch) {
    for (Index j = 0; j < w; ++j) k.at(ch, j) = noise(rng);
    k.at(ch, w - 1) += 1.0;
  }
  return k;
}

Tensor near_identity_conv2d(Index channels, Index kh, Index kw, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  Tensor k = Tensor::zeros({channels, kh, kw});
  const Index center = (kh / 2) * kw + kw / 2;
  for (Index ch = 0; ch < channels; ++ch) {
    for (Index j = 0; j < kh * kw; ++j) k[ch * kh * kw + j] = noise(rng);
    k[ch * kh * kw + center] += 1.0;
  }
  return k;
}

}  // namespace

void init_block_params(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                       std::mt19937_64& rng) {
  if (cfg.heads * cfg.head_dim != cfg.d)
    throw ConfigError("block: heads*head_dim (" + std::to_string(cfg.heads * cfg.head_dim) +
                      ") must equal d (" + std::to_string(cfg.d) + ")");
  const Index d = cfg.d, hk = cfg.heads * cfg.head_dim;
  store.add(prefix + "rms1.gain", Tensor::full({d}, 1.0));
  store.add(prefix + "rms2.gain", Tensor::full({d}, 1.0));
  store.add(prefix + "attn.wq", uniform_init({d, hk}, d, rng));
  store.add(prefix + "attn.wk", uniform_init({d, hk}, d, rng));
  store.add(prefix + "attn.wv", uniform_init({d, hk}, d, rng));
  store.add(prefix + "attn.phi_q", near_identity_conv1d(hk, cfg.conv1d_width, rng));
  store.add(prefix + "attn.phi_k", near_identity_conv1d(hk, cfg.conv1d_width, rng));
  store.add(prefix + "attn.phi_v", near_identity_conv1d(hk, cfg.conv1d_width, rng));
  store.add(prefix + "attn.conv2d",
            near_identity_conv2d(d, cfg.conv2d_extent, cfg.conv2d_extent, rng));
  store.add(prefix + "attn.lambda", Tensor::zeros({1}));
  // Zero so the local path is exactly silent at init (matches lambda = 0).
  store.add(prefix + "attn.local_proj.w", Tensor::zeros({d, d}));
  store.add(prefix + "attn.local_proj.b", Tensor::zeros({d}));
  store.add(prefix + "attn.w_alpha", uniform_init({d, cfg.heads}, d, rng));
  store.add(prefix + "attn.b_alpha", Tensor::zeros({cfg.heads}));
  store.add(prefix + "attn.w_beta", uniform_init({d, cfg.heads}, d, rng));
  store.add(prefix + "attn.b_beta", Tensor::zeros({cfg.heads}));
  store.add(prefix + "attn.w_g", uniform_init({d, d}, d, rng));
  store.add(prefix + "attn.b_g", Tensor::zeros({d}));
  store.add(prefix + "attn.out.w", uniform_init({d, d}, d, rng));
  store.add(prefix + "attn.out.b", Tensor::zeros({d}));
  store.add(prefix + "mlp.w1", uniform_init({d, cfg.d_ff}, d, rng));
  store.add(prefix + "mlp.w3", uniform_init({d, cfg.d_ff}, d, rng));
  store.add(prefix + "mlp.w2", uniform_init({cfg.d_ff, d}, cfg.d_ff, rng));
}

namespace {

// Locality mix -> phi projections -> gates -> chunked scan -> gate fusion ->
// output projection.
Var attention_module(Var zn, const GridLayout& layout, const BoundParams& p,
                     const std::string& pre, Var pad, const BlockConfig& cfg,
                     GateTrace* trace_out) {
  GradTape& t = *zn.tape();
  Var h = zn;
  Var z_local_seq;
  if (cfg.use_local) {
    Var grid = reconstruct_2d(zn, pad, layout);
    Var conv = depthwise_conv2d(grid, p.at(pre + "attn.conv2d"), pad, layout.height, layout.width);
    z_local_seq = extract_2d(conv, layout);
    h = lambda_fuse(zn, z_local_seq, p.at(pre + "attn.lambda"));
  }

  QkvVars qkv;
  qkv.heads = cfg.heads;
  qkv.dk = cfg.head_dim;
  qkv.dv = cfg.head_dim;
  qkv.q = short_conv1d(matmul(h, p.at(pre + "attn.wq")), p.at(pre + "attn.phi_q"));
  Var k_raw = short_conv1d(matmul(h, p.at(pre + "attn.wk")), p.at(pre + "attn.phi_k"));
  qkv.k = normalize_keys_allow_zero(k_raw, cfg.heads);
  qkv.v = short_conv1d(matmul(h, p.at(pre + "attn.wv")), p.at(pre + "attn.phi_v"));

  const Index n = zn.value().rows();
  GateVars gates;
  Var beta = sigmoid(
      row_broadcast_add(matmul(h, p.at(pre + "attn.w_beta")), p.at(pre + "attn.b_beta")));
  gates.beta = beta;
  if (cfg.use_gated) {
    gates.alpha = sigmoid(
        row_broadcast_add(matmul(h, p.at(pre + "attn.w_alpha")), p.at(pre + "attn.b_alpha")));
  } else {
    gates.alpha = t.constant(Tensor::full({n, cfg.heads}, 1.0));  // retention disabled
  }

  ScanOptions opts;
  opts.delta_removal = cfg.use_delta;
  ScanResult scan = chunked_scan(qkv, gates, cfg.chunk_size, {}, opts);

  if (trace_out) *trace_out = record_trace(gates);

  Var fused;
  if (cfg.use_local) {
    Var h_local = row_broadcast_add(matmul(z_local_seq, p.at(pre + "attn.local_proj.w")),
                                    p.at(pre + "attn.local_proj.b"));
    GateFuseResult f =
        output_gate_fuse(h, scan.output, h_local, p.at(pre + "attn.w_g"), p.at(pre + "attn.b_g"));
    fused = f.out;
    if (trace_out) trace_out->fusion = f.gate.value();
  } else {
    // Local branch removed: the fusion keeps only the gated global term.
    Var gate = sigmoid(
        row_broadcast_add(matmul(h, p.at(pre + "attn.w_g")), p.at(pre + "attn.b_g")));
    fused = mul(gate, scan.output);
    if (trace_out) trace_out->fusion = gate.value();
  }
  return row_broadcast_add(matmul(fused, p.at(pre + "attn.out.w")), p.at(pre + "attn.out.b"));
}

}  // namespace

Var block_forward(Var z, const GridLayout& layout, const BoundParams& params,
                  const std::string& prefix, Var pad, const BlockConfig& cfg, bool train,
                  std::mt19937_64& rng, BlockTrace* trace) {
  if (cfg.heads * cfg.head_dim != cfg.d)
    throw ConfigError("block_forward: heads*head_dim must equal d");
  Var zn = rms_norm(z, params.at(prefix + "rms1.gain"), cfg.rms_eps);
  GateTrace gate_trace;
  Var attn = attention_module(zn, layout, params, prefix, pad, cfg,
                              trace ? &gate_trace : nullptr);
  Var u = add(z, dropout(attn, cfg.dropout, rng, train));
  Var m = gated_mlp(rms_norm(u, params.at(prefix + "rms2.gain"), cfg.rms_eps),
                    params.at(prefix + "mlp.w1"), params.at(prefix + "mlp.w3"),
                    params.at(prefix + "mlp.w2"));
  Var out = add(u, dropout(m, cfg.dropout, rng, train));
  if (trace) trace->gates = std::move(gate_trace);
  return out;
}

Var stack_forward(Var z, const GridLayout& layout, const BoundParams& params, Var pad,
                  const BlockConfig& cfg, Index layers, bool train, std::mt19937_64& rng,
                  std::vector<BlockTrace>* traces) {
  if (layers < 1) throw ConfigError("stack_forward: need at least one block");
  Var x = z;
  for (Index l = 0; l < layers; ++l) {
    BlockTrace tr;
    x = block_forward(x, layout, params, "blocks." + std::to_string(l) + ".", pad, cfg, train, rng,
                      traces ? &tr : nullptr);
    if (traces) traces->push_back(std::move(tr));
  }
  return x;
}

}  // namespace deltamil
