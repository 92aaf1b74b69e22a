#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "skiplayer/common.hpp"
#include "skiplayer/rng.hpp"

namespace skiplayer {

inline constexpr int32_t kPadToken = 256;
inline constexpr int32_t kEotToken = 257;
inline constexpr int64_t kByteVocab = 258;  // 256 bytes + pad + eot

std::vector<int32_t> encode_bytes(std::string_view text);

// Inverse of encode_bytes for byte-valued ids; special ids are an error.
std::string decode_bytes(const std::vector<int32_t>& ids);

// Contiguous token stream with a deterministic train/validation split.
struct Corpus {
  std::vector<int32_t> train;
  std::vector<int32_t> valid;

  static Corpus from_text(std::string_view text, double valid_frac);
  static Corpus load(const std::string& path, double valid_frac);
};

struct Batch {
  int64_t batch = 0;
  int64_t time = 0;
  std::vector<int32_t> inputs;   // batch*time
  std::vector<int32_t> targets;  // batch*time, shifted by one
  std::vector<uint8_t> loss_mask;
};

// Uniform random windows with next-token targets. Positions whose target
// is the pad token are masked out of the loss.
Batch sample_batch(const std::vector<int32_t>& stream, int64_t batch,
                   int64_t time, RngStream& rng);

// Deterministic word-salad corpus: sentences drawn from a small vocabulary
// with a heavily repeated filler word, separated by spaces and newlines.
// Learnable structure for small models, with known high-frequency tokens.
std::string synthetic_text(int64_t target_bytes, uint64_t seed);

}  // namespace skiplayer
