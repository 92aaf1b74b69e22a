#include "skiplayer/data.hpp"

#include <fstream>

namespace skiplayer {

std::vector<int32_t> encode_bytes(std::string_view text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string decode_bytes(const std::vector<int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    SKL_CHECK_ARG(id >= 0 && id < 256,
                  "detokenize: id " + std::to_string(id) +
                      " is not a byte value");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Corpus Corpus::from_text(std::string_view text, double valid_frac) {
  SKL_CHECK_ARG(valid_frac >= 0.0 && valid_frac < 1.0,
                "corpus: validation fraction must lie in [0, 1)");
  std::vector<int32_t> ids = encode_bytes(text);
  ids.push_back(kEotToken);
  const int64_t n = static_cast<int64_t>(ids.size());
  const int64_t n_valid = static_cast<int64_t>(
      valid_frac * static_cast<double>(n));
  Corpus c;
  c.train.assign(ids.begin(), ids.end() - n_valid);
  c.valid.assign(ids.end() - n_valid, ids.end());
  return c;
}

Corpus Corpus::load(const std::string& path, double valid_frac) {
  std::ifstream in(path, std::ios::binary);
  SKL_CHECK_ARG(in.good(), "corpus: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  SKL_CHECK_ARG(!text.empty(), "corpus: '" + path + "' is empty");
  return from_text(text, valid_frac);
}

Batch sample_batch(const std::vector<int32_t>& stream, int64_t batch,
                   int64_t time, RngStream& rng) {
  SKL_CHECK_ARG(batch > 0 && time > 0, "sampler: batch and time must be positive");
  const int64_t n = static_cast<int64_t>(stream.size());
  SKL_CHECK_ARG(n > time, "sampler: corpus of " + std::to_string(n) +
                              " tokens is too short for windows of " +
                              std::to_string(time));
  Batch b;
  b.batch = batch;
  b.time = time;
  b.inputs.resize(static_cast<size_t>(batch * time));
  b.targets.resize(static_cast<size_t>(batch * time));
  b.loss_mask.resize(static_cast<size_t>(batch * time));
  for (int64_t i = 0; i < batch; ++i) {
    const int64_t off = static_cast<int64_t>(rng.below(
        static_cast<uint64_t>(n - time)));
    for (int64_t t = 0; t < time; ++t) {
      const int32_t tgt = stream[static_cast<size_t>(off + t + 1)];
      b.inputs[static_cast<size_t>(i * time + t)] =
          stream[static_cast<size_t>(off + t)];
      b.targets[static_cast<size_t>(i * time + t)] = tgt;
      b.loss_mask[static_cast<size_t>(i * time + t)] =
          tgt == kPadToken ? 0 : 1;
    }
  }
  return b;
}

std::string synthetic_text(int64_t target_bytes, uint64_t seed) {
  static const char* kWords[] = {
      "stone", "river",  "lantern", "quiet",  "meadow", "copper",
      "signal", "harbor", "velvet",  "thistle", "orbit",  "ember",
      "willow", "cinder", "marble",  "falcon"};
  constexpr int kNumWords = 16;
  const std::string filler = "um";
  RngStream rng(seed, "synthetic");
  std::string out;
  out.reserve(static_cast<size_t>(target_bytes) + 64);
  while (static_cast<int64_t>(out.size()) < target_bytes) {
    const int len = 4 + static_cast<int>(rng.below(6));
    for (int w = 0; w < len; ++w) {
      // filler roughly every other word
      if (rng.below(2) == 0) {
        out += filler;
      } else {
        out += kWords[rng.below(kNumWords)];
      }
      out += ' ';
    }
    out += '\n';
  }
  out.resize(static_cast<size_t>(target_bytes));
  return out;
}

}  // namespace skiplayer
