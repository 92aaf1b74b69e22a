#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace skiplayer {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

[[noreturn]] inline void fail_arg(const std::string& msg) {
  throw std::invalid_argument(msg);
}

#define SKL_CHECK(cond, msg)                          \
  do {                                                \
    if (!(cond)) ::skiplayer::fail(msg);              \
  } while (0)

#define SKL_CHECK_ARG(cond, msg)                      \
  do {                                                \
    if (!(cond)) ::skiplayer::fail_arg(msg);          \
  } while (0)

// Per-token execute/skip decisions for one layer, row-major over (batch, time).
struct Mask {
  int64_t batch = 0;
  int64_t time = 0;
  std::vector<uint8_t> on;  // batch*time entries, each 0 or 1

  int64_t size() const { return batch * time; }
  bool at(int64_t b, int64_t t) const { return on[b * time + t] != 0; }
  int64_t count_on() const {
    return std::accumulate(on.begin(), on.end(), int64_t{0},
                           [](int64_t a, uint8_t v) { return a + (v != 0); });
  }
  double ratio() const {
    return size() == 0 ? 0.0 : static_cast<double>(count_on()) / static_cast<double>(size());
  }
  static Mask all_on(int64_t batch, int64_t time) {
    return Mask{batch, time, std::vector<uint8_t>(static_cast<size_t>(batch * time), 1)};
  }
  static Mask all_off(int64_t batch, int64_t time) {
    return Mask{batch, time, std::vector<uint8_t>(static_cast<size_t>(batch * time), 0)};
  }
};

}  // namespace skiplayer
