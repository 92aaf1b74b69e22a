#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "skiplayer/config.hpp"
#include "skiplayer/decode.hpp"
#include "skiplayer/stats.hpp"

namespace fs = std::filesystem;
using namespace skiplayer;

namespace {

constexpr double kValidFrac = 0.1;
constexpr int64_t kSyntheticBytes = 1 << 20;

struct Opts {
  std::string config_path, checkpoint, prompt, out;
  std::optional<uint64_t> seed;
  std::optional<int64_t> steps;
  std::string engine, variant;
  std::string trace_path;
};

void add_common(CLI::App* cmd, Opts& o) {
  cmd->add_option("--config", o.config_path, "Config file (JSON)");
  cmd->add_option("--seed", o.seed, "Override config seed");
  cmd->add_option("--steps", o.steps,
                  "Override step budget (train) or max new tokens (decode)");
  cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  cmd->add_option("--prompt", o.prompt, "Decode prompt text");
  cmd->add_option("--engine", o.engine, "Engine: sparse or masked_dense");
  cmd->add_option("--variant", o.variant,
                  "Variant: skiplayer, standard, wideffn, highway, random");
  cmd->add_option("--out", o.out, "Output directory or file");
}

RunConfig resolve_config(const Opts& o, bool out_is_dir) {
  RunConfig cfg;
  if (!o.config_path.empty())
    cfg = load_run_config(o.config_path);
  else if (!o.checkpoint.empty())
    cfg = parse_run_config(read_checkpoint_config(o.checkpoint));
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.train.steps = *o.steps;
  if (!o.engine.empty()) cfg.engine.kind = engine_from(o.engine);
  if (!o.variant.empty()) cfg.model.variant = variant_from(o.variant);
  if (!o.out.empty() && out_is_dir) cfg.paths.out = o.out;
  cfg.normalize();
  cfg.validate();
  return cfg;
}

Corpus load_corpus(const RunConfig& cfg) {
  if (cfg.paths.corpus.empty()) {
    std::printf("corpus: synthetic, %lld bytes, seed %llu\n",
                static_cast<long long>(kSyntheticBytes),
                static_cast<unsigned long long>(cfg.seed));
    return Corpus::from_text(synthetic_text(kSyntheticBytes, cfg.seed),
                             kValidFrac);
  }
  return Corpus::load(cfg.paths.corpus, kValidFrac);
}

void check_identity(const std::string& stored_text, const RunConfig& cfg) {
  RunConfig stored = parse_run_config(stored_text);
  stored.normalize();
  SKL_CHECK(model_identity(stored) == model_identity(cfg),
            "checkpoint: config mismatch (stored model differs from the "
            "requested one)");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  SKL_CHECK(os.good(), "cannot open '" + path + "' for writing");
  os << text;
}

int run_train(const Opts& o) {
  RunConfig cfg = resolve_config(o, true);
  fs::create_directories(cfg.paths.out);
  const std::string cfg_text = serialize_run_config(cfg);
  write_text(cfg.paths.out + "/config.json", cfg_text);

  Corpus corpus = load_corpus(cfg);
  ModelParams<float> params = ModelParams<float>::init(cfg.model, cfg.seed);
  TrainState<float> st(std::move(params), cfg.train.opt);

  const bool resume = !o.checkpoint.empty();
  if (resume) {
    std::string stored =
        load_checkpoint(o.checkpoint, st.params, st.opt, st.step);
    check_identity(stored, cfg);
    std::printf("resumed from %s at step %lld\n", o.checkpoint.c_str(),
                static_cast<long long>(st.step));
  }

  const std::string metrics_path = cfg.paths.out + "/metrics.jsonl";
  std::ofstream metrics(metrics_path,
                        resume ? std::ios::app : std::ios::trunc);
  SKL_CHECK(metrics.good(), "cannot open '" + metrics_path + "' for writing");

  ForwardOptions<float> fopt = forward_options<float>(cfg);
  while (st.step < cfg.train.steps) {
    TrainMetrics m = train_step(st, corpus.train, cfg.train, cfg.seed, fopt);
    const bool log = m.step % cfg.train.log_every == 0 || m.step == 1 ||
                     m.step == cfg.train.steps;
    if (log) {
      nlohmann::json j;
      j["step"] = m.step;
      j["loss"] = m.total;
      j["nll"] = m.nll;
      j["aux"] = m.aux;
      j["density"] = m.mean_density();
      j["layer_density"] = m.layer_density;
      j["lr"] = m.lr;
      j["tokens_per_s"] = m.tokens_per_s;
      metrics << j.dump() << "\n";
      metrics.flush();
      std::printf(
          "step %6lld  loss %.4f  nll %.4f  aux %.4f  density %.3f  "
          "lr %.2e  tok/s %.0f\n",
          static_cast<long long>(m.step), m.total, m.nll, m.aux,
          m.mean_density(), m.lr, m.tokens_per_s);
    }
    if (cfg.train.checkpoint_every > 0 &&
        m.step % cfg.train.checkpoint_every == 0 &&
        m.step != cfg.train.steps) {
      save_checkpoint(cfg.paths.out + "/ckpt_" + std::to_string(m.step) +
                          ".bin",
                      st.params, st.opt, st.step, cfg_text);
    }
  }

  const std::string final_path = cfg.paths.out + "/model.ckpt";
  save_checkpoint(final_path, st.params, st.opt, st.step, cfg_text);
  std::printf("saved %s\n", final_path.c_str());

  if (static_cast<int64_t>(corpus.valid.size()) > cfg.train.time) {
    const double nll =
        eval_nll(st.params, corpus.valid, cfg.train.batch, cfg.train.time,
                 cfg.train.eval_batches, cfg.seed,
                 forward_options<float>(cfg));
    nlohmann::json j;
    j["step"] = st.step;
    j["valid_nll"] = nll;
    j["valid_ppl"] = std::exp(nll);
    metrics << j.dump() << "\n";
    std::printf("valid nll %.4f  ppl %.2f\n", nll, std::exp(nll));
  }
  return 0;
}

int run_eval(const Opts& o) {
  SKL_CHECK_ARG(!o.checkpoint.empty(), "eval: --checkpoint is required");
  RunConfig cfg = resolve_config(o, false);
  ModelParams<float> params = ModelParams<float>::init(cfg.model, cfg.seed);
  Adafactor<float> opt(cfg.train.opt);
  int64_t step = 0;
  std::string stored = load_checkpoint(o.checkpoint, params, opt, step);
  check_identity(stored, cfg);

  Corpus corpus = load_corpus(cfg);
  SKL_CHECK(static_cast<int64_t>(corpus.valid.size()) > cfg.train.time,
            "eval: validation split too short");
  const double nll =
      eval_nll(params, corpus.valid, cfg.train.batch, cfg.train.time,
               cfg.train.eval_batches, cfg.seed, forward_options<float>(cfg));
  std::printf("step %lld  valid nll %.6f  ppl %.4f\n",
              static_cast<long long>(step), nll, std::exp(nll));
  if (!o.out.empty()) {
    nlohmann::json j;
    j["step"] = step;
    j["valid_nll"] = nll;
    j["valid_ppl"] = std::exp(nll);
    write_text(o.out, j.dump() + "\n");
  }
  return 0;
}

int run_decode(const Opts& o) {
  SKL_CHECK_ARG(!o.checkpoint.empty(), "decode: --checkpoint is required");
  SKL_CHECK_ARG(!o.prompt.empty(), "decode: --prompt is required");
  RunConfig cfg = resolve_config(o, false);
  ModelParams<float> params = ModelParams<float>::init(cfg.model, cfg.seed);
  Adafactor<float> opt(cfg.train.opt);
  int64_t step = 0;
  std::string stored = load_checkpoint(o.checkpoint, params, opt, step);
  check_identity(stored, cfg);

  const int64_t max_new = o.steps ? *o.steps : 64;
  DecodeResult<float> res = greedy_decode(params, encode_bytes(o.prompt),
                                          max_new, kEotToken, cfg.seed);

  std::vector<int32_t> printable;
  for (int32_t t : res.tokens)
    if (t < 256) printable.push_back(t);
  std::printf("%s%s\n", o.prompt.c_str(), decode_bytes(printable).c_str());

  double executed = 0;
  for (const auto& s : res.trace.steps)
    for (uint8_t b : s.executed) executed += b;
  const double per_tok =
      res.trace.steps.empty()
          ? 0.0
          : executed / static_cast<double>(res.trace.steps.size());
  std::printf("tokens %zu  mean layers executed %.3f of %lld  macs %llu\n",
              res.tokens.size(), per_tok,
              static_cast<long long>(res.trace.layers),
              static_cast<unsigned long long>(res.macs));
  if (!o.out.empty()) write_text(o.out, trace_to_json(res.trace));
  return 0;
}

int run_stats(const Opts& o) {
  SKL_CHECK_ARG(!o.trace_path.empty(), "stats: trace file is required");
  std::ifstream is(o.trace_path);
  SKL_CHECK_ARG(is.good(), "stats: cannot open '" + o.trace_path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string tsv = skip_stats_tsv(skip_stats(trace_from_json(ss.str())));
  if (!o.out.empty())
    write_text(o.out, tsv);
  else
    std::fputs(tsv.c_str(), stdout);
  return 0;
}

int run_flops(const Opts& o) {
  RunConfig cfg = resolve_config(o, false);
  std::vector<double> capacity(static_cast<size_t>(cfg.model.layers),
                               cfg.model.p_target);
  FlopsReport report =
      flops_per_token(cfg.model, capacity, cfg.train.time);
  const std::string tsv = flops_tsv(cfg.model, report);
  if (!o.out.empty())
    write_text(o.out, tsv);
  else
    std::fputs(tsv.c_str(), stdout);
  return 0;
}

// ---- selftest ----

double loss_at(const ModelParams<double>& params,
               const std::vector<int32_t>& inputs,
               const std::vector<int32_t>& targets,
               const std::vector<uint8_t>& mask, int64_t batch, int64_t time,
               const ForwardOptions<double>& opt) {
  Tape<double> tape;
  ForwardResult<double> fwd = forward(tape, params, inputs, batch, time, opt);
  LossResult<double> loss =
      compute_loss(tape, fwd, targets, mask, params.cfg);
  return loss.total.item();
}

void selftest_check(bool ok, const std::string& name) {
  SKL_CHECK(ok, "selftest failed: " + name);
  std::printf("ok - %s\n", name.c_str());
}

int run_selftest(const Opts&) {
  // f32 gemm against the fixed-order f64 path.
  {
    RngStream rng(7, "selftest.gemm");
    const int64_t m = 17, n = 13, k = 29;
    std::vector<float> a(m * k), b(k * n), c(m * n, 0.f);
    std::vector<double> ad(m * k), bd(k * n), cd(m * n, 0.0);
    for (int64_t i = 0; i < m * k; ++i) ad[i] = a[i] = (float)rng.normal();
    for (int64_t i = 0; i < k * n; ++i) bd[i] = b[i] = (float)rng.normal();
    gemm(false, false, m, n, k, 1.f, a.data(), k, b.data(), n, 0.f, c.data(),
         n);
    gemm(false, false, m, n, k, 1.0, ad.data(), k, bd.data(), n, 0.0,
         cd.data(), n);
    double worst = 0;
    for (int64_t i = 0; i < m * n; ++i)
      worst = std::max(worst, std::abs(c[i] - cd[i]) /
                                  std::max(1.0, std::abs(cd[i])));
    selftest_check(worst < 1e-4, "gemm f32 matches f64 reference");
  }

  ModelConfig mc;
  mc.dim = 32;
  mc.layers = 2;
  mc.heads = 2;
  mc.head_dim = 16;
  mc.ffn_mult = 2;
  mc.time = 16;
  mc.vocab = kByteVocab;
  mc.router = RouterMode::top1;
  mc.validate();

  const int64_t batch = 2, time = 12;
  RngStream data_rng(11, "selftest.data");
  std::vector<int32_t> inputs, targets;
  for (int64_t i = 0; i < batch * time; ++i) {
    inputs.push_back(static_cast<int32_t>(data_rng.below(256)));
    targets.push_back(static_cast<int32_t>(data_rng.below(256)));
  }
  std::vector<uint8_t> mask(inputs.size(), 1);

  // Sparse executor against the masked-dense engine, values and gradients.
  {
    ModelParams<double> params = ModelParams<double>::init(mc, 3);
    auto run = [&](Engine engine, std::vector<double>& grad_out) {
      params.zero_grads();
      Tape<double> tape;
      ForwardOptions<double> opt;
      opt.engine = engine;
      opt.gsize = 3;
      ForwardResult<double> fwd =
          forward(tape, params, inputs, batch, time, opt);
      LossResult<double> loss = compute_loss(tape, fwd, targets, mask, mc);
      tape.backward(loss.total);
      const Tensor<double>& w = params.layers[0].w_ff1;
      grad_out.assign(w.grad(), w.grad() + w.numel());
      return std::vector<double>(fwd.logits.value(),
                                 fwd.logits.value() + fwd.logits.numel());
    };
    std::vector<double> gs, gd;
    std::vector<double> ls = run(Engine::sparse, gs);
    std::vector<double> ld = run(Engine::masked_dense, gd);
    selftest_check(ls == ld, "sparse engine logits match masked_dense");
    double worst = 0;
    for (size_t i = 0; i < gs.size(); ++i)
      worst = std::max(worst, std::abs(gs[i] - gd[i]) /
                                  std::max({std::abs(gs[i]), std::abs(gd[i]),
                                            1e-8}));
    selftest_check(worst < 1e-10, "sparse engine gradients match");
  }

  // Finite differences through the dense baseline.
  {
    ModelConfig dense = mc;
    dense.variant = Variant::standard;
    dense.p_target = 1.0;
    dense.validate();
    ModelParams<double> params = ModelParams<double>::init(dense, 5);
    ForwardOptions<double> opt;

    params.zero_grads();
    Tape<double> tape;
    ForwardResult<double> fwd = forward(tape, params, inputs, batch, time, opt);
    LossResult<double> loss = compute_loss(tape, fwd, targets, mask, dense);
    tape.backward(loss.total);

    RngStream pick(13, "selftest.fd");
    double worst = 0;
    auto named = params.named();
    for (int trial = 0; trial < 10; ++trial) {
      auto& [name, t] = named[static_cast<size_t>(
          pick.below(static_cast<int64_t>(named.size())))];
      const int64_t idx = pick.below(t.numel());
      const double save = t.value()[idx], h = 1e-5;
      t.value()[idx] = save + h;
      const double up = loss_at(params, inputs, targets, mask, batch, time, opt);
      t.value()[idx] = save - h;
      const double dn = loss_at(params, inputs, targets, mask, batch, time, opt);
      t.value()[idx] = save;
      const double fd = (up - dn) / (2 * h), an = t.grad()[idx];
      worst = std::max(worst, std::abs(fd - an) /
                                  std::max({std::abs(fd), std::abs(an), 1e-8}));
    }
    selftest_check(worst < 1e-4, "loss gradients match finite differences");
  }

  // Incremental decoding against the batch forward.
  {
    ModelParams<double> params = ModelParams<double>::init(mc, 9);
    std::vector<int32_t> toks(inputs.begin(), inputs.begin() + time);
    Tape<double> tape;
    ForwardOptions<double> opt;
    ForwardResult<double> fwd = forward(tape, params, toks, 1, time, opt);
    DecodeSession<double> session(params);
    bool same = true;
    for (int64_t t = 0; t < time; ++t) {
      std::vector<double> logits = session.step(toks[t]);
      for (int64_t v = 0; v < mc.vocab; ++v)
        same = same && logits[v] == fwd.logits.value()[t * mc.vocab + v];
    }
    selftest_check(same, "incremental decode matches batch forward");
  }

  std::printf("selftest: all checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-skipping transformer LM workbench"};
  app.require_subcommand(1);
  Opts o;

  CLI::App* train = app.add_subcommand("train", "Train a model");
  CLI::App* eval = app.add_subcommand("eval", "Validation nll/perplexity");
  CLI::App* decode = app.add_subcommand("decode", "Greedy-decode a prompt");
  CLI::App* stats =
      app.add_subcommand("stats", "Aggregate a decode trace into a table");
  CLI::App* flops =
      app.add_subcommand("flops", "FLOPs/token and effective depth");
  CLI::App* selftest =
      app.add_subcommand("selftest", "Run the built-in oracle suite");
  for (CLI::App* c : {train, eval, decode, stats, flops, selftest})
    add_common(c, o);
  stats->add_option("trace", o.trace_path, "Decode trace JSON file");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return run_train(o);
    if (eval->parsed()) return run_eval(o);
    if (decode->parsed()) return run_decode(o);
    if (stats->parsed()) return run_stats(o);
    if (flops->parsed()) return run_flops(o);
    if (selftest->parsed()) return run_selftest(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
