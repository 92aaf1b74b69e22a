#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "skiplayer/tensor.hpp"

namespace skiplayer {

// Central-difference gradient estimate for one parameter tensor. `f` must
// rebuild the forward pass from current parameter values and return the
// scalar loss value. Only meaningful for double precision.
template <typename S>
std::vector<S> fd_gradient(Tensor<S>& param, const std::function<S()>& f,
                           S step) {
  std::vector<S> grad(static_cast<size_t>(param.numel()));
  S* p = param.data();
  for (int64_t i = 0; i < param.numel(); ++i) {
    const S keep = p[i];
    p[i] = keep + step;
    const S hi = f();
    p[i] = keep - step;
    const S lo = f();
    p[i] = keep;
    grad[static_cast<size_t>(i)] = (hi - lo) / (S(2) * step);
  }
  return grad;
}

template <typename S>
struct GradCompare {
  S max_rel = 0;      // worst relative mismatch
  int64_t worst = -1; // flat index of the worst element
  S got = 0, want = 0;
};

// Relative error |a-b| / max(|a|, |b|, floor) elementwise; returns the worst.
template <typename S>
GradCompare<S> compare_grads(const S* got, const std::vector<S>& want,
                             S floor = S(1e-8)) {
  GradCompare<S> r;
  for (size_t i = 0; i < want.size(); ++i) {
    const S a = got[i];
    const S b = want[i];
    const S denom = std::max({std::abs(a), std::abs(b), floor});
    const S rel = std::abs(a - b) / denom;
    if (rel > r.max_rel) {
      r.max_rel = rel;
      r.worst = static_cast<int64_t>(i);
      r.got = a;
      r.want = b;
    }
  }
  return r;
}

}  // namespace skiplayer
