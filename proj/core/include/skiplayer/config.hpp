#pragma once

#include <string>

#include "skiplayer/train.hpp"

namespace skiplayer {

struct EngineSettings {
  Engine kind = Engine::sparse;
  int64_t gsize = 0;  // 0: derive from gsize_scale
  double gsize_scale = 1.0 / 128.0;
};

struct PathSettings {
  std::string corpus;
  std::string out = "out";
};

// Full experiment description. Serializes to a JSON document with sections
// {seed, model, router, train, engine, paths}; unknown keys are rejected.
struct RunConfig {
  uint64_t seed = 1;
  ModelConfig model;
  TrainSettings train;
  EngineSettings engine;
  PathSettings paths;

  // Reconciles dependent fields after overrides: the random variant forces
  // the random router, dense variants force a full capacity target.
  void normalize();
  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

// Canonical text of the sections that fix parameter shapes and semantics
// (model + router). Two configs with equal identity accept each other's
// checkpoints; engine or schedule differences do not.
std::string model_identity(const RunConfig& cfg);

template <typename S>
ForwardOptions<S> forward_options(const RunConfig& cfg) {
  ForwardOptions<S> opt;
  opt.seed = cfg.seed;
  opt.engine = cfg.engine.kind;
  opt.gsize = cfg.engine.gsize;
  opt.gsize_scale = cfg.engine.gsize_scale;
  return opt;
}

}  // namespace skiplayer
