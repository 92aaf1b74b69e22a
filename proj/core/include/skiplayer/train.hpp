#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "skiplayer/data.hpp"
#include "skiplayer/model.hpp"

namespace skiplayer {

// Constant peak for the warmup window, then inverse-sqrt decay anchored at
// the warmup step so the curve is continuous.
inline double lr_schedule(int64_t step, int64_t warmup, double peak) {
  SKL_CHECK_ARG(warmup >= 1, "lr_schedule: warmup must be at least 1");
  SKL_CHECK_ARG(step >= 1, "lr_schedule: step must be at least 1");
  if (step <= warmup) return peak;
  return peak * std::sqrt(static_cast<double>(warmup) /
                          static_cast<double>(step));
}

struct AdafactorSettings {
  double beta2 = 0.99;
  double eps = 1e-30;
  double clip = 1.0;  // update RMS threshold
};

// Adafactor with beta1 = 0: no momentum buffer, factored second moments for
// matrices (row/col mean accumulators), a full vector otherwise. No bias
// correction; update RMS is clipped at the threshold before applying.
template <typename S>
class Adafactor {
 public:
  struct Slot {
    bool factored = false;
    std::vector<double> row, col;  // factored accumulators
    std::vector<double> full;      // dense accumulator
  };

  Adafactor() = default;
  explicit Adafactor(AdafactorSettings s) : cfg_(s) {}

  const AdafactorSettings& settings() const { return cfg_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

  void step(const ModelParams<S>& params, double lr) {
    for (const auto& [name, t] : params.named()) update_one(name, t, lr);
  }

 private:
  static bool use_factored(const Shape& sh) {
    return sh.size() == 2 && sh[0] > 1 && sh[1] > 1;
  }

  Slot& slot_for(const std::string& name, const Shape& sh) {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
      Slot s;
      s.factored = use_factored(sh);
      if (s.factored) {
        s.row.assign(static_cast<size_t>(sh[0]), 0.0);
        s.col.assign(static_cast<size_t>(sh[1]), 0.0);
      } else {
        s.full.assign(static_cast<size_t>(numel_of(sh)), 0.0);
      }
      it = slots_.emplace(name, std::move(s)).first;
    }
    return it->second;
  }

  void update_one(const std::string& name, const Tensor<S>& t, double lr) {
    const int64_t n = t.numel();
    const S* g = t.grad();
    S* p = t.value();
    for (int64_t i = 0; i < n; ++i)
      SKL_CHECK(std::isfinite(static_cast<double>(g[i])),
                "adafactor: non-finite gradient in '" + name + "'");

    Slot& s = slot_for(name, t.shape());
    const double b2 = cfg_.beta2, eps = cfg_.eps;
    std::vector<double> u(static_cast<size_t>(n));

    if (s.factored) {
      const int64_t rows = t.dim(0), cols = t.dim(1);
      std::vector<double> rmean(static_cast<size_t>(rows), 0.0);
      std::vector<double> cmean(static_cast<size_t>(cols), 0.0);
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) {
          const double gg = static_cast<double>(g[i * cols + j]);
          const double v = gg * gg + eps;
          rmean[static_cast<size_t>(i)] += v;
          cmean[static_cast<size_t>(j)] += v;
        }
      double total = 0;
      for (int64_t i = 0; i < rows; ++i) {
        rmean[static_cast<size_t>(i)] /= static_cast<double>(cols);
        total += rmean[static_cast<size_t>(i)];
      }
      total /= static_cast<double>(rows);
      for (int64_t j = 0; j < cols; ++j)
        cmean[static_cast<size_t>(j)] /= static_cast<double>(rows);
      for (int64_t i = 0; i < rows; ++i)
        s.row[static_cast<size_t>(i)] =
            b2 * s.row[static_cast<size_t>(i)] +
            (1.0 - b2) * rmean[static_cast<size_t>(i)];
      for (int64_t j = 0; j < cols; ++j)
        s.col[static_cast<size_t>(j)] =
            b2 * s.col[static_cast<size_t>(j)] +
            (1.0 - b2) * cmean[static_cast<size_t>(j)];
      double row_total = 0;
      for (double r : s.row) row_total += r;
      row_total /= static_cast<double>(rows);
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) {
          const double vhat = s.row[static_cast<size_t>(i)] *
                              s.col[static_cast<size_t>(j)] / row_total;
          u[static_cast<size_t>(i * cols + j)] =
              static_cast<double>(g[i * cols + j]) / std::sqrt(vhat + eps);
        }
    } else {
      for (int64_t i = 0; i < n; ++i) {
        const double gg = static_cast<double>(g[i]);
        double& v = s.full[static_cast<size_t>(i)];
        v = b2 * v + (1.0 - b2) * (gg * gg + eps);
        u[static_cast<size_t>(i)] = gg / std::sqrt(v + eps);
      }
    }

    double ms = 0;
    for (int64_t i = 0; i < n; ++i)
      ms += u[static_cast<size_t>(i)] * u[static_cast<size_t>(i)];
    const double rms = std::sqrt(ms / static_cast<double>(n));
    const double denom = std::max(1.0, rms / cfg_.clip);
    const double scale = lr / denom;
    for (int64_t i = 0; i < n; ++i)
      p[i] = static_cast<S>(static_cast<double>(p[i]) -
                            scale * u[static_cast<size_t>(i)]);
  }

  AdafactorSettings cfg_;
  std::map<std::string, Slot> slots_;
};

struct TrainSettings {
  int64_t steps = 1000;
  int64_t batch = 32;
  int64_t time = 128;
  double lr_peak = 0.01;
  int64_t warmup = 100;
  AdafactorSettings opt;
  int64_t log_every = 50;
  int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int64_t eval_batches = 8;
};

struct TrainMetrics {
  int64_t step = 0;
  double total = 0, nll = 0, aux = 0;
  std::vector<double> layer_density;  // hard execute rate per layer
  double lr = 0;
  double tokens_per_s = 0;

  double mean_density() const {
    double s = 0;
    for (double r : layer_density) s += r;
    return layer_density.empty() ? 0.0
                                 : s / static_cast<double>(layer_density.size());
  }
};

template <typename S>
struct TrainState {
  ModelParams<S> params;
  Adafactor<S> opt;
  int64_t step = 0;  // completed optimizer steps

  TrainState() = default;
  TrainState(ModelParams<S> p, AdafactorSettings s)
      : params(std::move(p)), opt(s) {}
};

// One optimizer step on a freshly sampled batch. Batch selection, routing
// noise, and random masks are all derived from (seed, step), so a run is
// reproducible from the checkpointed step counter alone.
template <typename S>
TrainMetrics train_step(TrainState<S>& st, const std::vector<int32_t>& stream,
                        const TrainSettings& ts, uint64_t seed,
                        ForwardOptions<S> opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t step = st.step;

  RngStream rng(seed, "batch", static_cast<uint64_t>(step));
  Batch batch = sample_batch(stream, ts.batch, ts.time, rng);

  st.params.zero_grads();
  Tape<S> tape;
  opt.stochastic = true;
  opt.seed = seed;
  opt.step = step;
  ForwardResult<S> fwd =
      forward(tape, st.params, batch.inputs, batch.batch, batch.time, opt);
  LossResult<S> loss =
      compute_loss(tape, fwd, batch.targets, batch.loss_mask, st.params.cfg);
  tape.backward(loss.total);

  const double lr = lr_schedule(step + 1, ts.warmup, ts.lr_peak);
  st.opt.step(st.params, lr);
  st.step = step + 1;

  TrainMetrics m;
  m.step = st.step;
  m.total = static_cast<double>(loss.total.item());
  m.nll = static_cast<double>(loss.nll.item());
  m.aux = static_cast<double>(loss.aux.item());
  m.layer_density = fwd.hard_density();
  m.lr = lr;
  const double sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  if (sec > 0)
    m.tokens_per_s =
        static_cast<double>(batch.batch * batch.time) / sec;
  return m;
}

// Mean validation nll over a fixed, seed-derived set of batches with
// deterministic routing.
template <typename S>
double eval_nll(const ModelParams<S>& params, const std::vector<int32_t>& stream,
                int64_t batch, int64_t time, int64_t n_batches, uint64_t seed,
                ForwardOptions<S> opt = {}) {
  SKL_CHECK_ARG(n_batches > 0, "eval: need at least one batch");
  opt.stochastic = false;
  opt.seed = seed;
  double sum = 0;
  for (int64_t i = 0; i < n_batches; ++i) {
    RngStream rng(seed, "eval", static_cast<uint64_t>(i));
    Batch b = sample_batch(stream, batch, time, rng);
    Tape<S> tape;
    opt.step = i;
    ForwardResult<S> fwd = forward(tape, params, b.inputs, b.batch, b.time, opt);
    Tensor<S> nll = tape.cross_entropy_mean(fwd.logits, b.targets, b.loss_mask);
    sum += static_cast<double>(nll.item());
  }
  return sum / static_cast<double>(n_batches);
}

// ---- checkpoint io ----
//
// Layout: magic "SKLCKPT1" | u32 version | u64 digest of the config text |
// u32 config length | config bytes | u64 step | records. Each record is
// u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 ndim | i64 dims |
// raw little-endian payload. Parameter records come first in declaration
// order, then optimizer accumulators as opt.<param>.{row,col,full}.

inline constexpr char kCkptMagic[8] = {'S', 'K', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCkptVersion = 1;

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  return v;
}
inline uint64_t get_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  return v;
}

inline void put_record_header(std::ostream& os, const std::string& name,
                              uint8_t dtype, const Shape& shape) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  put_u32(os, static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) put_u64(os, static_cast<uint64_t>(d));
}

struct RecordHeader {
  std::string name;
  uint8_t dtype = 0;
  Shape shape;
};

inline bool get_record_header(std::istream& is, RecordHeader& out) {
  uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (is.eof()) return false;
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  out.name.resize(len);
  is.read(out.name.data(), len);
  is.read(reinterpret_cast<char*>(&out.dtype), 1);
  const uint32_t ndim = get_u32(is);
  SKL_CHECK(ndim <= 8, "checkpoint: corrupt record header");
  out.shape.clear();
  for (uint32_t i = 0; i < ndim; ++i)
    out.shape.push_back(static_cast<int64_t>(get_u64(is)));
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  return true;
}

template <typename T>
void put_payload(std::ostream& os, const T* data, int64_t n) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(T))));
}

template <typename T>
void get_payload(std::istream& is, T* data, int64_t n) {
  is.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(T))));
  SKL_CHECK(is.good(), "checkpoint: truncated file");
}

template <typename S>
constexpr uint8_t dtype_code() {
  return std::is_same_v<S, float> ? 0 : 1;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const ModelParams<S>& params,
                     const Adafactor<S>& opt, int64_t step,
                     const std::string& config_text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  SKL_CHECK(os.good(), "checkpoint: cannot open '" + path + "' for writing");
  os.write(kCkptMagic, sizeof kCkptMagic);
  detail::put_u32(os, kCkptVersion);
  detail::put_u64(os, fnv1a64(config_text));
  detail::put_u32(os, static_cast<uint32_t>(config_text.size()));
  os.write(config_text.data(),
           static_cast<std::streamsize>(config_text.size()));
  detail::put_u64(os, static_cast<uint64_t>(step));

  for (const auto& [name, t] : params.named()) {
    detail::put_record_header(os, name, detail::dtype_code<S>(), t.shape());
    detail::put_payload(os, t.value(), t.numel());
  }
  for (const auto& [name, slot] : opt.slots()) {
    auto emit = [&](const std::string& suffix, const std::vector<double>& v) {
      if (v.empty()) return;
      detail::put_record_header(os, "opt." + name + "." + suffix, 1,
                                Shape{static_cast<int64_t>(v.size())});
      detail::put_payload(os, v.data(), static_cast<int64_t>(v.size()));
    };
    emit("row", slot.row);
    emit("col", slot.col);
    emit("full", slot.full);
  }
  os.flush();
  SKL_CHECK(os.good(), "checkpoint: write to '" + path + "' failed");
}

// Reads only the header and embedded config text, validating the digest.
inline std::string read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  SKL_CHECK(is.good(), "checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  SKL_CHECK(is.good() && std::memcmp(magic, kCkptMagic, 8) == 0,
            "checkpoint: bad magic in '" + path + "'");
  const uint32_t version = detail::get_u32(is);
  SKL_CHECK(version == kCkptVersion,
            "checkpoint: unsupported version " + std::to_string(version));
  const uint64_t digest = detail::get_u64(is);
  const uint32_t len = detail::get_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  SKL_CHECK(fnv1a64(text) == digest, "checkpoint: config digest mismatch");
  return text;
}

// Loads into params/opt built from a matching config. When expect_config is
// given it must hash to the stored digest.
template <typename S>
std::string load_checkpoint(const std::string& path, ModelParams<S>& params,
                            Adafactor<S>& opt, int64_t& step,
                            const std::string* expect_config = nullptr) {
  std::ifstream is(path, std::ios::binary);
  SKL_CHECK(is.good(), "checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  SKL_CHECK(is.good() && std::memcmp(magic, kCkptMagic, 8) == 0,
            "checkpoint: bad magic in '" + path + "'");
  const uint32_t version = detail::get_u32(is);
  SKL_CHECK(version == kCkptVersion,
            "checkpoint: unsupported version " + std::to_string(version));
  const uint64_t digest = detail::get_u64(is);
  const uint32_t len = detail::get_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  SKL_CHECK(is.good(), "checkpoint: truncated file");
  SKL_CHECK(fnv1a64(text) == digest, "checkpoint: config digest mismatch");
  if (expect_config)
    SKL_CHECK(fnv1a64(*expect_config) == digest,
              "checkpoint: config digest mismatch");
  step = static_cast<int64_t>(detail::get_u64(is));

  auto named = params.named();
  size_t next = 0;
  detail::RecordHeader rec;
  while (detail::get_record_header(is, rec)) {
    if (rec.name.rfind("opt.", 0) == 0) {
      SKL_CHECK(next == named.size(),
                "checkpoint: optimizer record '" + rec.name +
                    "' before all parameters were read");
      SKL_CHECK(rec.dtype == 1 && rec.shape.size() == 1,
                "checkpoint: malformed accumulator '" + rec.name + "'");
      std::string base = rec.name.substr(4);
      const size_t dot = base.rfind('.');
      SKL_CHECK(dot != std::string::npos,
                "checkpoint: malformed accumulator '" + rec.name + "'");
      const std::string suffix = base.substr(dot + 1);
      base = base.substr(0, dot);
      auto& slot = opt.slots()[base];
      std::vector<double> v(static_cast<size_t>(rec.shape[0]));
      detail::get_payload(is, v.data(), rec.shape[0]);
      if (suffix == "row") {
        slot.factored = true;
        slot.row = std::move(v);
      } else if (suffix == "col") {
        slot.factored = true;
        slot.col = std::move(v);
      } else if (suffix == "full") {
        slot.factored = false;
        slot.full = std::move(v);
      } else {
        fail("checkpoint: malformed accumulator '" + rec.name + "'");
      }
      continue;
    }
    SKL_CHECK(next < named.size(),
              "checkpoint: unexpected record '" + rec.name + "'");
    const auto& [name, t] = named[next++];
    SKL_CHECK(rec.name == name, "checkpoint: expected parameter '" + name +
                                    "', found '" + rec.name + "'");
    SKL_CHECK(rec.dtype == detail::dtype_code<S>(),
              "checkpoint: dtype mismatch for '" + name + "'");
    SKL_CHECK(rec.shape == t.shape(),
              "checkpoint: shape mismatch for '" + name + "': stored " +
                  shape_str(rec.shape) + ", model expects " +
                  shape_str(t.shape()));
    detail::get_payload(is, t.value(), t.numel());
  }
  SKL_CHECK(next == named.size(), "checkpoint: missing parameter records");
  return text;
}

}  // namespace skiplayer
