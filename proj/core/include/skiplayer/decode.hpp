#pragma once

#include <string>
#include <vector>

#include "skiplayer/model.hpp"

namespace skiplayer {

// Per-step routing record for one decoded stream: which token was fed,
// which layers executed for it, and the token chosen next.
struct DecodeTrace {
  int64_t layers = 0;
  struct Step {
    int32_t input_token = 0;
    int32_t chosen_token = 0;
    std::vector<uint8_t> executed;  // one bit per layer
  };
  std::vector<Step> steps;
};

// Single-stream incremental decoder. Every layer appends this position's
// key/value projection no matter what the router decides, so skipped
// positions stay visible to later queries; a skipped layer does no other
// work and passes its input through unchanged. Routing is deterministic:
// argmax for the weighted modes, threshold for sigmoid, a session-seeded
// stream for the random variant.
//
// The math deliberately mirrors the batched forward op for op (same gemm
// entry points, same row kernels, same accumulation order), which makes
// f64 decode outputs bit-identical to the batched pass.
template <typename S>
class DecodeSession {
 public:
  explicit DecodeSession(const ModelParams<S>& params, uint64_t seed = 0)
      : params_(&params), seed_(seed) {
    const ModelConfig& cfg = params.cfg;
    kcache_.resize(static_cast<size_t>(cfg.layers));
    vcache_.resize(static_cast<size_t>(cfg.layers));
    for (auto& c : kcache_) c.reserve(static_cast<size_t>(cfg.time * cfg.dim));
    for (auto& c : vcache_) c.reserve(static_cast<size_t>(cfg.time * cfg.dim));
  }

  int64_t position() const { return pos_; }
  uint64_t macs() const { return macs_; }
  const std::vector<uint8_t>& last_executed() const { return last_exec_; }

  void reset() {
    for (auto& c : kcache_) c.clear();
    for (auto& c : vcache_) c.clear();
    pos_ = 0;
    macs_ = 0;
    last_exec_.clear();
  }

  // Feeds one token and returns the next-token logits [V].
  std::vector<S> step(int32_t token) {
    const ModelConfig& cfg = params_->cfg;
    const int64_t d = cfg.dim, hd = cfg.head_dim, heads = cfg.heads;
    SKL_CHECK_ARG(token >= 0 && token < cfg.vocab,
                  "decode: token id " + std::to_string(token) +
                      " out of range for vocab " + std::to_string(cfg.vocab));
    SKL_CHECK_ARG(pos_ < cfg.time,
                  "decode: position " + std::to_string(pos_) +
                      " exceeds maximum sequence length " +
                      std::to_string(cfg.time));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      SKL_CHECK(static_cast<int64_t>(kcache_[l].size()) == pos_ * d &&
                    static_cast<int64_t>(vcache_[l].size()) == pos_ * d,
                "decode: cache length out of sync at layer " +
                    std::to_string(l));
    }
    last_exec_.assign(static_cast<size_t>(cfg.layers), uint8_t{1});

    std::vector<S> x(static_cast<size_t>(d));
    {
      const S* te = params_->tok_emb.data() + token * d;
      const S* pe = params_->pos_emb.data() + pos_ * d;
      for (int64_t i = 0; i < d; ++i) x[i] = te[i] + pe[i];
    }

    std::vector<S> ln1(d), ln2(d), kv(d), q(d), att(d), att_o(d), xp(d), h1,
        ffn(d), logits2(2);
    const S alpha = S(1) / std::sqrt(static_cast<S>(hd));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      const LayerParams<S>& lp = params_->layers[static_cast<size_t>(l)];
      bool exec_block = true;
      if (cfg.routes_whole_block())
        exec_block = decide(x.data(), lp, l);

      layer_norm_row(x.data(), lp.ln1_gain.data(), lp.ln1_bias.data(),
                     static_cast<S>(cfg.ln_eps), d, ln1.data());
      kcache_[l].resize(static_cast<size_t>((pos_ + 1) * d));
      vcache_[l].resize(static_cast<size_t>((pos_ + 1) * d));
      gemm(false, false, 1, d, d, S(1), ln1.data(), d, lp.wk.data(), d, S(0),
           kcache_[l].data() + pos_ * d, d);
      gemm(false, false, 1, d, d, S(1), ln1.data(), d, lp.wv.data(), d, S(0),
           vcache_[l].data() + pos_ * d, d);
      macs_ += static_cast<uint64_t>(2 * d * d);

      const bool exec_attn =
          cfg.routes_whole_block() ? exec_block : true;
      if (exec_attn) {
        gemm(false, false, 1, d, d, S(1), ln1.data(), d, lp.wq.data(), d, S(0),
             q.data(), d);
        const int64_t ctx = pos_ + 1;
        std::vector<S> scores(static_cast<size_t>(ctx));
        for (int64_t h = 0; h < heads; ++h) {
          const S* kh = kcache_[l].data() + h * hd;
          const S* vh = vcache_[l].data() + h * hd;
          gemm(false, true, 1, ctx, hd, alpha, q.data() + h * hd, hd, kh, d,
               S(0), scores.data(), ctx);
          softmax_row(scores.data(), ctx);
          gemm(false, false, 1, hd, ctx, S(1), scores.data(), ctx, vh, d, S(0),
               att.data() + h * hd, hd);
        }
        gemm(false, false, 1, d, d, S(1), att.data(), d, lp.wo.data(), d, S(0),
             att_o.data(), d);
        for (int64_t i = 0; i < d; ++i) xp[i] = x[i] + att_o[i];
        macs_ += static_cast<uint64_t>(2 * d * d + 2 * ctx * d);
      } else {
        xp = x;
      }

      bool exec_ffn = exec_attn;
      if (cfg.variant == Variant::wideffn) {
        exec_ffn = decide(xp.data(), lp, l);
        last_exec_[static_cast<size_t>(l)] = exec_ffn ? 1 : 0;
      } else if (cfg.routes_whole_block()) {
        last_exec_[static_cast<size_t>(l)] = exec_block ? 1 : 0;
      }

      if (cfg.variant == Variant::skiplayer || cfg.variant == Variant::random) {
        if (exec_block) {
          ffn_row(lp, xp.data(), ln2.data(), h1, ffn.data());
          for (int64_t i = 0; i < d; ++i) x[i] = xp[i] + ffn[i];
        }
        // skipped: x unchanged, no LN2/FFN work
      } else if (cfg.variant == Variant::wideffn) {
        if (exec_ffn) {
          ffn_row(lp, xp.data(), ln2.data(), h1, ffn.data());
          for (int64_t i = 0; i < d; ++i) x[i] = xp[i] + ffn[i];
        } else {
          x = xp;
        }
      } else if (cfg.variant == Variant::highway) {
        ffn_row(lp, xp.data(), ln2.data(), h1, ffn.data());
        S z;
        gemm(false, false, 1, 1, d, S(1), ln2.data(), d, lp.w_carry.data(), 1,
             S(0), &z, 1);
        const S t = sigmoid_scalar(z);
        for (int64_t i = 0; i < d; ++i)
          x[i] = t * ffn[i] + (S(1) - t) * xp[i];
        macs_ += static_cast<uint64_t>(d);
      } else {  // standard
        ffn_row(lp, xp.data(), ln2.data(), h1, ffn.data());
        for (int64_t i = 0; i < d; ++i) x[i] = xp[i] + ffn[i];
      }
    }

    std::vector<S> xf(static_cast<size_t>(d));
    layer_norm_row(x.data(), params_->ln_f_gain.data(),
                   params_->ln_f_bias.data(), static_cast<S>(cfg.ln_eps), d,
                   xf.data());
    std::vector<S> logits(static_cast<size_t>(cfg.vocab));
    gemm(false, false, 1, cfg.vocab, d, S(1), xf.data(), d,
         params_->out_proj.data(), cfg.vocab, S(0), logits.data(), cfg.vocab);
    macs_ += static_cast<uint64_t>(d * cfg.vocab);
    ++pos_;
    return logits;
  }

 private:
  bool decide(const S* x, const LayerParams<S>& lp, int64_t layer) {
    const ModelConfig& cfg = params_->cfg;
    const int64_t d = cfg.dim;
    switch (cfg.effective_router()) {
      case RouterMode::gumbel_st:
      case RouterMode::top1: {
        S lg[2];
        gemm(false, false, 1, 2, d, S(1), x, d, lp.w_route.data(), 2, S(0), lg,
             2);
        macs_ += static_cast<uint64_t>(2 * d);
        return lg[1] > lg[0];
      }
      case RouterMode::sigmoid: {
        S lg[2];
        gemm(false, false, 1, 2, d, S(1), x, d, lp.w_route.data(), 2, S(0), lg,
             2);
        macs_ += static_cast<uint64_t>(2 * d);
        return sigmoid_scalar(lg[1]) > static_cast<S>(cfg.theta);
      }
      case RouterMode::random: {
        RngStream rng(seed_, "decode.randmask.layer" + std::to_string(layer),
                      static_cast<uint64_t>(pos_));
        return rng.bernoulli(cfg.p_target);
      }
      case RouterMode::always_on:
        return true;
    }
    return true;
  }

  void ffn_row(const LayerParams<S>& lp, const S* in, S* ln_out,
               std::vector<S>& hidden, S* out) {
    const ModelConfig& cfg = params_->cfg;
    const int64_t d = cfg.dim, h = cfg.ffn_hidden();
    layer_norm_row(in, lp.ln2_gain.data(), lp.ln2_bias.data(),
                   static_cast<S>(cfg.ln_eps), d, ln_out);
    hidden.resize(static_cast<size_t>(h));
    gemm(false, false, 1, h, d, S(1), ln_out, d, lp.w_ff1.data(), h, S(0),
         hidden.data(), h);
    for (int64_t i = 0; i < h; ++i)
      hidden[i] = cfg.act == Activation::gelu
                      ? gelu_scalar(hidden[i])
                      : (hidden[i] > S(0) ? hidden[i] : S(0));
    gemm(false, false, 1, d, h, S(1), hidden.data(), h, lp.w_ff2.data(), d,
         S(0), out, d);
    macs_ += static_cast<uint64_t>(2 * d * h);
  }

  const ModelParams<S>* params_;
  uint64_t seed_ = 0;
  std::vector<std::vector<S>> kcache_, vcache_;
  int64_t pos_ = 0;
  uint64_t macs_ = 0;
  std::vector<uint8_t> last_exec_;
};

template <typename S>
struct DecodeResult {
  std::vector<int32_t> tokens;  // generated only, prompt excluded
  DecodeTrace trace;            // every processed position, prompt included
  uint64_t macs = 0;
};

// Greedy argmax generation; ties take the lowest token id. Stops after
// max_new tokens or once end-of-text is produced (the eot is kept).
template <typename S>
DecodeResult<S> greedy_decode(const ModelParams<S>& params,
                              const std::vector<int32_t>& prompt,
                              int64_t max_new, int32_t eot_id,
                              uint64_t seed = 0) {
  SKL_CHECK_ARG(!prompt.empty(), "decode: prompt must not be empty");
  DecodeResult<S> res;
  res.trace.layers = params.cfg.layers;
  DecodeSession<S> session(params, seed);
  std::vector<S> logits;
  auto feed = [&](int32_t token) {
    logits = session.step(token);
    int32_t best = 0;
    for (int64_t i = 1; i < static_cast<int64_t>(logits.size()); ++i)
      if (logits[i] > logits[best]) best = static_cast<int32_t>(i);
    res.trace.steps.push_back(
        {token, best, session.last_executed()});
    return best;
  };
  int32_t next = 0;
  for (int32_t token : prompt) next = feed(token);
  for (int64_t n = 0; n < max_new; ++n) {
    res.tokens.push_back(next);
    if (next == eot_id) break;
    if (n + 1 < max_new) next = feed(next);
  }
  res.macs = session.macs();
  return res;
}

}  // namespace skiplayer
