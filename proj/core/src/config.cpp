#include "skiplayer/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

namespace skiplayer {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& section,
                    std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      fail_arg("config: unknown key '" + key + "' in '" + section + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void read_model(const json& j, ModelConfig& m) {
  reject_unknown(j, "model",
                 {"dim", "layers", "heads", "head_dim", "ffn_mult", "time",
                  "vocab", "variant", "activation", "ln_eps"});
  read(j, "dim", m.dim);
  read(j, "layers", m.layers);
  read(j, "heads", m.heads);
  if (auto it = j.find("head_dim"); it != j.end())
    m.head_dim = it->get<int64_t>();
  else if (m.heads > 0)
    m.head_dim = m.dim / m.heads;
  read(j, "ffn_mult", m.ffn_mult);
  read(j, "time", m.time);
  read(j, "vocab", m.vocab);
  if (auto it = j.find("variant"); it != j.end())
    m.variant = variant_from(it->get<std::string>());
  if (auto it = j.find("activation"); it != j.end())
    m.act = activation_from(it->get<std::string>());
  read(j, "ln_eps", m.ln_eps);
}

void read_router(const json& j, ModelConfig& m) {
  reject_unknown(j, "router", {"mode", "p_target", "tau", "theta",
                               "aux_weight"});
  if (auto it = j.find("mode"); it != j.end())
    m.router = router_mode_from(it->get<std::string>());
  read(j, "p_target", m.p_target);
  read(j, "tau", m.tau);
  read(j, "theta", m.theta);
  read(j, "aux_weight", m.aux_weight);
}

void read_train(const json& j, TrainSettings& t) {
  reject_unknown(j, "train",
                 {"steps", "batch", "time", "lr_peak", "warmup", "beta2",
                  "eps", "clip", "log_every", "checkpoint_every",
                  "eval_batches"});
  read(j, "steps", t.steps);
  read(j, "batch", t.batch);
  read(j, "time", t.time);
  read(j, "lr_peak", t.lr_peak);
  read(j, "warmup", t.warmup);
  read(j, "beta2", t.opt.beta2);
  read(j, "eps", t.opt.eps);
  read(j, "clip", t.opt.clip);
  read(j, "log_every", t.log_every);
  read(j, "checkpoint_every", t.checkpoint_every);
  read(j, "eval_batches", t.eval_batches);
}

void read_engine(const json& j, EngineSettings& e) {
  reject_unknown(j, "engine", {"kind", "gsize", "gsize_scale"});
  if (auto it = j.find("kind"); it != j.end())
    e.kind = engine_from(it->get<std::string>());
  read(j, "gsize", e.gsize);
  read(j, "gsize_scale", e.gsize_scale);
}

void read_paths(const json& j, PathSettings& p) {
  reject_unknown(j, "paths", {"corpus", "out"});
  read(j, "corpus", p.corpus);
  read(j, "out", p.out);
}

}  // namespace

void RunConfig::normalize() {
  if (model.variant == Variant::random) model.router = RouterMode::random;
  if (model.variant == Variant::standard || model.variant == Variant::highway)
    model.p_target = 1.0;
  if (model.heads > 0 && model.heads * model.head_dim != model.dim)
    model.head_dim = model.dim / model.heads;
}

void RunConfig::validate() const {
  model.validate();
  SKL_CHECK_ARG(train.steps >= 1, "config: train.steps must be positive");
  SKL_CHECK_ARG(train.batch >= 1, "config: train.batch must be positive");
  SKL_CHECK_ARG(train.time >= 1, "config: train.time must be positive");
  SKL_CHECK_ARG(train.time <= model.time,
                "config: train.time exceeds model.time");
  SKL_CHECK_ARG(train.lr_peak > 0, "config: train.lr_peak must be positive");
  SKL_CHECK_ARG(train.warmup >= 1, "config: train.warmup must be at least 1");
  SKL_CHECK_ARG(train.opt.beta2 > 0 && train.opt.beta2 < 1,
                "config: train.beta2 must be in (0, 1)");
  SKL_CHECK_ARG(train.opt.eps > 0, "config: train.eps must be positive");
  SKL_CHECK_ARG(train.opt.clip > 0, "config: train.clip must be positive");
  SKL_CHECK_ARG(train.log_every >= 1,
                "config: train.log_every must be positive");
  SKL_CHECK_ARG(train.checkpoint_every >= 0,
                "config: train.checkpoint_every must be non-negative");
  SKL_CHECK_ARG(train.eval_batches >= 1,
                "config: train.eval_batches must be positive");
  SKL_CHECK_ARG(engine.gsize >= 0,
                "config: engine.gsize must be non-negative");
  SKL_CHECK_ARG(engine.gsize_scale > 0,
                "config: engine.gsize_scale must be positive");
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail_arg(std::string("config: ") + e.what());
  }
  if (!j.is_object()) fail_arg("config: top level must be an object");
  reject_unknown(j, "config",
                 {"seed", "model", "router", "train", "engine", "paths"});

  RunConfig cfg;
  try {
    read(j, "seed", cfg.seed);
    if (auto it = j.find("model"); it != j.end()) read_model(*it, cfg.model);
    if (auto it = j.find("router"); it != j.end()) read_router(*it, cfg.model);
    if (auto it = j.find("train"); it != j.end()) read_train(*it, cfg.train);
    if (auto it = j.find("engine"); it != j.end())
      read_engine(*it, cfg.engine);
    if (auto it = j.find("paths"); it != j.end()) read_paths(*it, cfg.paths);
  } catch (const json::exception& e) {
    fail_arg(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  SKL_CHECK_ARG(is.good(), "config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string model_identity(const RunConfig& cfg) {
  json j;
  j["model"] = {{"dim", cfg.model.dim},
                {"layers", cfg.model.layers},
                {"heads", cfg.model.heads},
                {"head_dim", cfg.model.head_dim},
                {"ffn_mult", cfg.model.ffn_mult},
                {"time", cfg.model.time},
                {"vocab", cfg.model.vocab},
                {"variant", to_string(cfg.model.variant)},
                {"activation", to_string(cfg.model.act)},
                {"ln_eps", cfg.model.ln_eps}};
  j["router"] = {{"mode", to_string(cfg.model.router)},
                 {"p_target", cfg.model.p_target},
                 {"tau", cfg.model.tau},
                 {"theta", cfg.model.theta},
                 {"aux_weight", cfg.model.aux_weight}};
  return j.dump();
}

std::string serialize_run_config(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["model"] = {{"dim", cfg.model.dim},
                {"layers", cfg.model.layers},
                {"heads", cfg.model.heads},
                {"head_dim", cfg.model.head_dim},
                {"ffn_mult", cfg.model.ffn_mult},
                {"time", cfg.model.time},
                {"vocab", cfg.model.vocab},
                {"variant", to_string(cfg.model.variant)},
                {"activation", to_string(cfg.model.act)},
                {"ln_eps", cfg.model.ln_eps}};
  j["router"] = {{"mode", to_string(cfg.model.router)},
                 {"p_target", cfg.model.p_target},
                 {"tau", cfg.model.tau},
                 {"theta", cfg.model.theta},
                 {"aux_weight", cfg.model.aux_weight}};
  j["train"] = {{"steps", cfg.train.steps},
                {"batch", cfg.train.batch},
                {"time", cfg.train.time},
                {"lr_peak", cfg.train.lr_peak},
                {"warmup", cfg.train.warmup},
                {"beta2", cfg.train.opt.beta2},
                {"eps", cfg.train.opt.eps},
                {"clip", cfg.train.opt.clip},
                {"log_every", cfg.train.log_every},
                {"checkpoint_every", cfg.train.checkpoint_every},
                {"eval_batches", cfg.train.eval_batches}};
  j["engine"] = {{"kind", to_string(cfg.engine.kind)},
                 {"gsize", cfg.engine.gsize},
                 {"gsize_scale", cfg.engine.gsize_scale}};
  j["paths"] = {{"corpus", cfg.paths.corpus}, {"out", cfg.paths.out}};
  return j.dump(2) + "\n";
}

}  // namespace skiplayer
