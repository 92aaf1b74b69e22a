#pragma once

#include <string>

#include "skiplayer/autodiff.hpp"
#include "skiplayer/rng.hpp"

namespace skiplayer {

enum class RouterMode { gumbel_st, top1, sigmoid, random, always_on };

inline std::string to_string(RouterMode m) {
  switch (m) {
    case RouterMode::gumbel_st: return "gumbel_st";
    case RouterMode::top1: return "top1";
    case RouterMode::sigmoid: return "sigmoid";
    case RouterMode::random: return "random";
    case RouterMode::always_on: return "always_on";
  }
  return "?";
}

inline RouterMode router_mode_from(const std::string& s) {
  if (s == "gumbel_st") return RouterMode::gumbel_st;
  if (s == "top1") return RouterMode::top1;
  if (s == "sigmoid") return RouterMode::sigmoid;
  if (s == "random") return RouterMode::random;
  if (s == "always_on") return RouterMode::always_on;
  fail_arg("unknown router mode '" + s + "'");
}

inline bool mode_has_weights(RouterMode m) {
  return m == RouterMode::gumbel_st || m == RouterMode::top1 ||
         m == RouterMode::sigmoid;
}

// One layer's routing outcome: the hard execute/skip mask, the soft gate
// pair g:[B,T,2] that carries gradient through the straight-through
// combine and the capacity term, and the logits when a weighted head ran.
template <typename S>
struct RouteResult {
  Mask mask;
  Tensor<S> g;
  Tensor<S> logits;

  double hard_r() const { return mask.ratio(); }
};

template <typename S>
Tensor<S> gumbel_noise(int64_t batch, int64_t time, RngStream& rng) {
  Tensor<S> n = Tensor<S>::zeros({batch, time, 2});
  S* p = n.data();
  for (int64_t i = 0; i < n.numel(); ++i) p[i] = static_cast<S>(rng.gumbel());
  return n;
}

namespace detail {

// Execute only when the execute score strictly beats the skip score; ties
// fall to skip.
template <typename S>
Mask argmax_mask(const Tensor<S>& pair_scores) {
  const int64_t batch = pair_scores.dim(0), time = pair_scores.dim(1);
  Mask m{batch, time,
         std::vector<uint8_t>(static_cast<size_t>(batch * time), 0)};
  const S* p = pair_scores.data();
  for (int64_t i = 0; i < batch * time; ++i)
    m.on[i] = p[i * 2 + 1] > p[i * 2 + 0] ? 1 : 0;
  return m;
}

}  // namespace detail

// Weighted-head routing (gumbel_st, top1, sigmoid). gumbel_st perturbs the
// logits with Gumbel noise in training and decides by argmax of the
// perturbed scores; top1 decides by plain argmax; sigmoid thresholds the
// execute probability at theta (strict). g stays differentiable through
// w_g in every mode. `forced` overrides the hard decision only.
template <typename S>
RouteResult<S> route_weighted(Tape<S>& tape, const Tensor<S>& x,
                              const Tensor<S>& w_g, RouterMode mode, S tau,
                              S theta, const Tensor<S>* noise,
                              const Mask* forced) {
  SKL_CHECK_ARG(tau > S(0), "router: temperature must be positive");
  SKL_CHECK_ARG(w_g.ndim() == 2 && w_g.dim(1) == 2,
                "router: weight must be [d,2], got " + shape_str(w_g.shape()));
  RouteResult<S> r;
  r.logits = tape.matmul(x, w_g);
  if (mode == RouterMode::sigmoid) {
    SKL_CHECK_ARG(theta > S(0) && theta < S(1),
                  "router: threshold must lie in (0, 1)");
    r.g = tape.sigmoid_gate_pair(r.logits);
    if (forced) {
      r.mask = *forced;
    } else {
      const int64_t n = r.logits.dim(0) * r.logits.dim(1);
      r.mask = Mask{r.logits.dim(0), r.logits.dim(1),
                    std::vector<uint8_t>(static_cast<size_t>(n), 0)};
      for (int64_t i = 0; i < n; ++i)
        r.mask.on[i] = r.g.data()[i * 2 + 1] > theta ? 1 : 0;
    }
    return r;
  }
  Tensor<S> pert =
      (mode == RouterMode::gumbel_st && noise) ? tape.add(r.logits, *noise)
                                               : r.logits;
  Tensor<S> scaled = tape.scale(pert, S(1) / tau);
  r.g = tape.softmax_lastdim(scaled);
  r.mask = forced ? *forced : detail::argmax_mask(scaled);
  return r;
}

// Random baseline: Bernoulli(p_exec) mask independent of the input,
// constant gate pair (1-p, p) so the capacity term sits on target.
template <typename S>
RouteResult<S> route_random(int64_t batch, int64_t time, S p_exec,
                            RngStream& rng, const Mask* forced) {
  RouteResult<S> r;
  if (forced) {
    r.mask = *forced;
  } else {
    r.mask = Mask{batch, time,
                  std::vector<uint8_t>(static_cast<size_t>(batch * time), 0)};
    for (int64_t i = 0; i < batch * time; ++i)
      r.mask.on[i] = rng.bernoulli(static_cast<double>(p_exec)) ? 1 : 0;
  }
  r.g = Tensor<S>::zeros({batch, time, 2});
  S* g = r.g.data();
  for (int64_t i = 0; i < batch * time; ++i) {
    g[i * 2 + 0] = S(1) - p_exec;
    g[i * 2 + 1] = p_exec;
  }
  return r;
}

// Dense baseline: every position executes, gate pinned to (0, 1).
template <typename S>
RouteResult<S> route_all_on(int64_t batch, int64_t time) {
  RouteResult<S> r;
  r.mask = Mask::all_on(batch, time);
  r.g = Tensor<S>::zeros({batch, time, 2});
  S* g = r.g.data();
  for (int64_t i = 0; i < batch * time; ++i) g[i * 2 + 1] = S(1);
  return r;
}

}  // namespace skiplayer
