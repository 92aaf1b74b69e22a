#pragma once

#include <string>
#include <utility>
#include <vector>

#include "skiplayer/router.hpp"
#include "skiplayer/sparse.hpp"

namespace skiplayer {

enum class Variant { skiplayer, standard, wideffn, highway, random };
enum class Engine { sparse, masked_dense };
enum class Activation { gelu, relu };

std::string to_string(Variant v);
std::string to_string(Engine e);
std::string to_string(Activation a);
Variant variant_from(const std::string& s);
Engine engine_from(const std::string& s);
Activation activation_from(const std::string& s);

struct ModelConfig {
  int64_t dim = 128;
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t head_dim = 32;  // heads * head_dim must equal dim
  int64_t ffn_mult = 8;
  int64_t time = 128;   // maximum sequence length
  int64_t vocab = 258;  // 256 bytes + pad + eot
  Variant variant = Variant::skiplayer;
  RouterMode router = RouterMode::gumbel_st;
  double p_target = 0.5;
  double tau = 1.0;
  double theta = 0.5;  // sigmoid-mode execute threshold
  double aux_weight = 0.1;
  Activation act = Activation::gelu;
  double ln_eps = 1e-5;

  int64_t ffn_hidden() const {
    return (variant == Variant::wideffn ? 2 : 1) * ffn_mult * dim;
  }
  // Which router actually runs: the random variant overrides the mode,
  // dense variants never route.
  RouterMode effective_router() const {
    if (variant == Variant::random) return RouterMode::random;
    if (variant == Variant::standard || variant == Variant::highway)
      return RouterMode::always_on;
    return router;
  }
  bool has_router_weights() const {
    return (variant == Variant::skiplayer || variant == Variant::wideffn) &&
           mode_has_weights(effective_router());
  }
  bool has_carry_weights() const { return variant == Variant::highway; }
  bool routes_whole_block() const {
    return variant == Variant::skiplayer || variant == Variant::random;
  }
  void validate() const;
};

template <typename S>
struct LayerParams {
  Tensor<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Tensor<S> wq, wk, wv, wo;
  Tensor<S> w_ff1, w_ff2;
  Tensor<S> w_route;  // [d,2], learned router only
  Tensor<S> w_carry;  // [d,1], highway only
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  Tensor<S> tok_emb, pos_emb;
  Tensor<S> ln_f_gain, ln_f_bias;
  Tensor<S> out_proj;
  std::vector<LayerParams<S>> layers;

  // Every tensor is drawn from its own stream keyed by (seed, name), so
  // the values do not depend on allocation order or on which optional
  // weights a variant owns.
  static ModelParams init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    const double wstd = 0.02;
    auto normal = [&](Shape shape, const std::string& name) {
      RngStream rng(seed, name);
      return Tensor<S>::randn(std::move(shape), rng, wstd, true);
    };
    const int64_t d = cfg.dim, h = cfg.ffn_hidden();
    p.tok_emb = normal({cfg.vocab, d}, "tok_emb");
    p.pos_emb = normal({cfg.time, d}, "pos_emb");
    p.ln_f_gain = Tensor<S>::full({d}, S(1), true);
    p.ln_f_bias = Tensor<S>::zeros({d}, true);
    p.out_proj = normal({d, cfg.vocab}, "out_proj");
    p.layers.resize(static_cast<size_t>(cfg.layers));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      LayerParams<S>& lp = p.layers[static_cast<size_t>(l)];
      const std::string pre = "layer" + std::to_string(l) + ".";
      lp.ln1_gain = Tensor<S>::full({d}, S(1), true);
      lp.ln1_bias = Tensor<S>::zeros({d}, true);
      lp.ln2_gain = Tensor<S>::full({d}, S(1), true);
      lp.ln2_bias = Tensor<S>::zeros({d}, true);
      lp.wq = normal({d, d}, pre + "attn.wq");
      lp.wk = normal({d, d}, pre + "attn.wk");
      lp.wv = normal({d, d}, pre + "attn.wv");
      lp.wo = normal({d, d}, pre + "attn.wo");
      lp.w_ff1 = normal({d, h}, pre + "ffn.w1");
      lp.w_ff2 = normal({h, d}, pre + "ffn.w2");
      if (cfg.has_router_weights()) lp.w_route = normal({d, 2}, pre + "route.w");
      if (cfg.has_carry_weights()) lp.w_carry = normal({d, 1}, pre + "carry.w");
    }
    return p;
  }

  // Stable name -> tensor listing; checkpoint record order.
  std::vector<std::pair<std::string, Tensor<S>>> named() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (int64_t l = 0; l < cfg.layers; ++l) {
      const LayerParams<S>& lp = layers[static_cast<size_t>(l)];
      const std::string pre = "layer" + std::to_string(l) + ".";
      out.emplace_back(pre + "ln1.gain", lp.ln1_gain);
      out.emplace_back(pre + "ln1.bias", lp.ln1_bias);
      out.emplace_back(pre + "attn.wq", lp.wq);
      out.emplace_back(pre + "attn.wk", lp.wk);
      out.emplace_back(pre + "attn.wv", lp.wv);
      out.emplace_back(pre + "attn.wo", lp.wo);
      out.emplace_back(pre + "ln2.gain", lp.ln2_gain);
      out.emplace_back(pre + "ln2.bias", lp.ln2_bias);
      out.emplace_back(pre + "ffn.w1", lp.w_ff1);
      out.emplace_back(pre + "ffn.w2", lp.w_ff2);
      if (cfg.has_router_weights()) out.emplace_back(pre + "route.w", lp.w_route);
      if (cfg.has_carry_weights()) out.emplace_back(pre + "carry.w", lp.w_carry);
    }
    out.emplace_back("ln_f.gain", ln_f_gain);
    out.emplace_back("ln_f.bias", ln_f_bias);
    out.emplace_back("out_proj", out_proj);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }

  void zero_grads() const {
    for (const auto& [name, t] : named()) t.zero_grad();
  }
};

template <typename S>
struct ForwardOptions {
  bool stochastic = false;  // Gumbel noise on (training mode)
  uint64_t seed = 0;
  uint64_t step = 0;
  const std::vector<Tensor<S>>* frozen_noise = nullptr;  // per layer [B,T,2]
  const std::vector<Mask>* forced_masks = nullptr;       // per layer
  bool soft_combine = false;  // smooth combine for finite differences
  bool hard_g = false;        // one-hot gate pair in the combine
  Engine engine = Engine::sparse;
  int64_t gsize = 0;          // 0 picks the default heuristic
  double gsize_scale = 1.0 / 128.0;
};

template <typename S>
struct ForwardResult {
  Tensor<S> logits;             // [B,T,V]
  std::vector<Mask> masks;      // per layer
  std::vector<Tensor<S>> g;     // per layer [B,T,2]
  std::vector<Tensor<S>> soft_r;  // per layer scalar, mean execute gate

  std::vector<double> hard_density() const {
    std::vector<double> out;
    out.reserve(masks.size());
    for (const auto& m : masks) out.push_back(m.ratio());
    return out;
  }
  double mean_hard_density() const {
    double s = 0;
    for (const auto& m : masks) s += m.ratio();
    return masks.empty() ? 0.0 : s / static_cast<double>(masks.size());
  }
};

template <typename S>
Tensor<S> one_hot_gates(const Mask& mask) {
  Tensor<S> g = Tensor<S>::zeros({mask.batch, mask.time, 2});
  for (int64_t i = 0; i < mask.size(); ++i)
    g.data()[i * 2 + (mask.on[i] ? 1 : 0)] = S(1);
  return g;
}

namespace detail {

template <typename S>
Tensor<S> ffn_block(Tape<S>& tape, const Tensor<S>& in, const LayerParams<S>& lp,
                    Activation act) {
  Tensor<S> a = tape.matmul(in, lp.w_ff1);
  a = act == Activation::gelu ? tape.gelu(a) : tape.relu(a);
  return tape.matmul(a, lp.w_ff2);
}

// Sparse engine follows the executor contract (skipped rows pass the input
// through); the masked_dense engine is the dense reference with the same
// row selection. Skipped rows are discarded by the combine either way.
template <typename S>
Tensor<S> ffn_on_mask(Tape<S>& tape, const Tensor<S>& in, const Mask& mask,
                      const LayerParams<S>& lp, const ModelConfig& cfg,
                      const ForwardOptions<S>& opt) {
  if (opt.engine == Engine::masked_dense) {
    Tensor<S> y = ffn_block(tape, in, lp, cfg.act);
    return tape.select_rows(y, in, mask);
  }
  const int64_t gsize =
      opt.gsize > 0 ? opt.gsize
                    : choose_gsize(opt.gsize_scale, cfg.p_target, mask.batch,
                                   mask.time);
  GroupFn<S> f = [&lp, &cfg](Tape<S>& t, const Tensor<S>& block) {
    return ffn_block(t, block, lp, cfg.act);
  };
  return execute_sparse(tape, in, mask, f, gsize, /*passthrough=*/true);
}

template <typename S>
RouteResult<S> route_for_layer(Tape<S>& tape, const Tensor<S>& x,
                               const LayerParams<S>& lp, const ModelConfig& cfg,
                               const ForwardOptions<S>& opt, int64_t layer) {
  const int64_t batch = x.dim(0), time = x.dim(1);
  const Mask* forced =
      opt.forced_masks ? &opt.forced_masks->at(static_cast<size_t>(layer))
                       : nullptr;
  switch (cfg.effective_router()) {
    case RouterMode::gumbel_st:
    case RouterMode::top1:
    case RouterMode::sigmoid: {
      Tensor<S> noise;
      const Tensor<S>* noise_ptr = nullptr;
      if (cfg.effective_router() == RouterMode::gumbel_st) {
        if (opt.frozen_noise) {
          noise_ptr = &opt.frozen_noise->at(static_cast<size_t>(layer));
        } else if (opt.stochastic) {
          RngStream rng(opt.seed, "gumbel.layer" + std::to_string(layer),
                        opt.step);
          noise = gumbel_noise<S>(batch, time, rng);
          noise_ptr = &noise;
        }
      }
      return route_weighted(tape, x, lp.w_route, cfg.effective_router(),
                            static_cast<S>(cfg.tau), static_cast<S>(cfg.theta),
                            noise_ptr, forced);
    }
    case RouterMode::random: {
      RngStream rng(opt.seed, "randmask.layer" + std::to_string(layer),
                    opt.step);
      return route_random<S>(batch, time, static_cast<S>(cfg.p_target), rng,
                             forced);
    }
    case RouterMode::always_on:
      return route_all_on<S>(batch, time);
  }
  fail("unreachable router mode");
}

// One block: pre-norm attention with query-side masking, sparse FFN, and
// the straight-through combine against the residual input. K/V cover every
// position so skipped tokens stay visible to later queries.
template <typename S>
Tensor<S> layer_forward(Tape<S>& tape, const Tensor<S>& x,
                        const LayerParams<S>& lp, const ModelConfig& cfg,
                        const ForwardOptions<S>& opt, int64_t layer,
                        ForwardResult<S>& res) {
  const int64_t batch = x.dim(0), time = x.dim(1);
  const S eps = static_cast<S>(cfg.ln_eps);

  // standard and highway run dense; skiplayer and random route the whole
  // block on the pre-norm input; wideffn keeps attention dense and routes
  // only the FFN below.
  RouteResult<S> route;
  if (cfg.routes_whole_block()) {
    route = route_for_layer(tape, x, lp, cfg, opt, layer);
  } else if (cfg.variant != Variant::wideffn) {
    route = route_all_on<S>(batch, time);
  }
  const Mask attn_mask =
      cfg.routes_whole_block() ? route.mask : Mask::all_on(batch, time);

  Tensor<S> ln1 = tape.layer_norm(x, lp.ln1_gain, lp.ln1_bias, eps);
  Tensor<S> k = tape.matmul(ln1, lp.wk);
  Tensor<S> v = tape.matmul(ln1, lp.wv);
  Tensor<S> q = tape.masked_linear(ln1, lp.wq, attn_mask);
  Tensor<S> att = tape.causal_attention(q, k, v, attn_mask, cfg.heads);
  Tensor<S> att_o = tape.masked_linear(att, lp.wo, attn_mask);
  Tensor<S> xp = tape.add(x, att_o);

  if (cfg.variant == Variant::wideffn) {
    // routing decides only whether the wide FFN runs for a position
    route = route_for_layer(tape, xp, lp, cfg, opt, layer);
  }
  const Mask& ffn_mask =
      cfg.variant == Variant::highway ? attn_mask : route.mask;

  Tensor<S> ln2 = tape.layer_norm(xp, lp.ln2_gain, lp.ln2_bias, eps);
  Tensor<S> ffn = ffn_on_mask(tape, ln2, ffn_mask, lp, cfg, opt);

  Tensor<S> next;
  if (cfg.variant == Variant::highway) {
    // gated FFN residual: out = ffn * t + xp * (1 - t); attention keeps its
    // ordinary residual above
    Tensor<S> z = tape.matmul(ln2, lp.w_carry);
    next = tape.highway_blend(ffn, xp, z);
  } else {
    Tensor<S> lo = tape.add(xp, ffn);
    const Tensor<S>& residual = cfg.variant == Variant::wideffn ? xp : x;
    Tensor<S> g_use =
        opt.hard_g ? one_hot_gates<S>(route.mask) : route.g;
    next = tape.st_combine(lo, residual, g_use, route.mask, opt.soft_combine);
  }

  res.masks.push_back(route.mask);
  res.g.push_back(route.g);
  res.soft_r.push_back(tape.mean_component_lastdim(route.g, 1));
  return next;
}

}  // namespace detail

template <typename S>
ForwardResult<S> forward(Tape<S>& tape, const ModelParams<S>& params,
                         const std::vector<int32_t>& tokens, int64_t batch,
                         int64_t time, const ForwardOptions<S>& opt) {
  const ModelConfig& cfg = params.cfg;
  SKL_CHECK_ARG(batch > 0 && time > 0, "forward: empty batch");
  SKL_CHECK_ARG(time <= cfg.time,
                "forward: sequence length " + std::to_string(time) +
                    " exceeds maximum " + std::to_string(cfg.time));
  ForwardResult<S> res;
  Tensor<S> x = tape.embedding(tokens, batch, time, params.tok_emb);
  x = tape.add_rows(x, params.pos_emb);
  for (int64_t l = 0; l < cfg.layers; ++l) {
    x = detail::layer_forward(tape, x, params.layers[static_cast<size_t>(l)],
                              cfg, opt, l, res);
  }
  Tensor<S> xf = tape.layer_norm(x, params.ln_f_gain, params.ln_f_bias,
                                 static_cast<S>(cfg.ln_eps));
  res.logits = tape.matmul(xf, params.out_proj);
  return res;
}

template <typename S>
struct LossResult {
  Tensor<S> total, nll, aux;  // scalars on the tape
  double mean_hard_density = 0;
};

// total = nll + aux_weight * sum_l (soft_r_l - p_target)^2. The capacity
// term uses the soft rates so the router weights receive gradient; hard
// densities are reported alongside for logging.
template <typename S>
LossResult<S> compute_loss(Tape<S>& tape, const ForwardResult<S>& fwd,
                           const std::vector<int32_t>& targets,
                           const std::vector<uint8_t>& loss_mask,
                           const ModelConfig& cfg) {
  LossResult<S> out;
  out.nll = tape.cross_entropy_mean(fwd.logits, targets, loss_mask);
  out.aux = tape.sq_deviation_sum(fwd.soft_r, static_cast<S>(cfg.p_target));
  out.total = tape.add_scaled(out.nll, out.aux, static_cast<S>(cfg.aux_weight));
  out.mean_hard_density = fwd.mean_hard_density();
  return out;
}

}  // namespace skiplayer
