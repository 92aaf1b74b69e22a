#include "skiplayer/model.hpp"

namespace skiplayer {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::skiplayer: return "skiplayer";
    case Variant::standard: return "standard";
    case Variant::wideffn: return "wideffn";
    case Variant::highway: return "highway";
    case Variant::random: return "random";
  }
  return "?";
}

std::string to_string(Engine e) {
  return e == Engine::sparse ? "sparse" : "masked_dense";
}

std::string to_string(Activation a) {
  return a == Activation::gelu ? "gelu" : "relu";
}

Variant variant_from(const std::string& s) {
  if (s == "skiplayer") return Variant::skiplayer;
  if (s == "standard") return Variant::standard;
  if (s == "wideffn") return Variant::wideffn;
  if (s == "highway") return Variant::highway;
  if (s == "random") return Variant::random;
  fail_arg("unknown variant '" + s + "'");
}

Engine engine_from(const std::string& s) {
  if (s == "sparse") return Engine::sparse;
  if (s == "masked_dense") return Engine::masked_dense;
  fail_arg("unknown engine '" + s + "'");
}

Activation activation_from(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  fail_arg("unknown activation '" + s + "'");
}

void ModelConfig::validate() const {
  SKL_CHECK_ARG(dim > 0, "model: dim must be positive");
  SKL_CHECK_ARG(layers > 0, "model: layers must be positive");
  SKL_CHECK_ARG(heads > 0 && head_dim > 0 && heads * head_dim == dim,
                "model: heads " + std::to_string(heads) + " x head_dim " +
                    std::to_string(head_dim) + " must equal dim " +
                    std::to_string(dim));
  SKL_CHECK_ARG(ffn_mult > 0, "model: ffn_mult must be positive");
  SKL_CHECK_ARG(time > 0, "model: time must be positive");
  SKL_CHECK_ARG(vocab > 1, "model: vocab must exceed 1");
  SKL_CHECK_ARG(p_target > 0.0 && p_target <= 1.0,
                "model: target density must lie in (0, 1]");
  SKL_CHECK_ARG(tau > 0.0, "model: temperature must be positive");
  SKL_CHECK_ARG(theta > 0.0 && theta < 1.0,
                "model: sigmoid threshold must lie in (0, 1)");
  SKL_CHECK_ARG(aux_weight >= 0.0, "model: capacity weight must be >= 0");
  SKL_CHECK_ARG(ln_eps > 0.0, "model: ln_eps must be positive");
  if (variant == Variant::standard || variant == Variant::highway) {
    SKL_CHECK_ARG(p_target == 1.0,
                  "model: dense variants require target density 1");
  }
  if (variant == Variant::random) {
    SKL_CHECK_ARG(router == RouterMode::random,
                  "model: random variant requires the random router");
  }
}

}  // namespace skiplayer
