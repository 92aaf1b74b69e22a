#pragma once

#include <functional>
#include <vector>

#include "skiplayer/autodiff.hpp"

namespace skiplayer {

struct Group {
  int64_t begin = 0;  // offset into GroupPlan::rows
  int64_t count = 0;  // active rows in this group, <= gsize
};

// Partition of the active rows of a mask into fixed-size work groups. Rows
// are ordered row-major over (batch, time); only the last group may be
// short, and its tail inside the [gsize, d] block is zero padding.
struct GroupPlan {
  int64_t gsize = 0;
  int64_t n_active = 0;
  std::vector<int64_t> rows;
  std::vector<Group> groups;
};

GroupPlan plan_groups(const Mask& mask, int64_t gsize);

// Group size heuristic: a fixed fraction of the expected active rows per
// batch, never below one.
int64_t choose_gsize(double scale, double p_target, int64_t batch,
                     int64_t time);

template <typename S>
using GroupFn = std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>;

// Run `f` only on rows the mask selects. Active rows are gathered into
// [gsize, d] blocks, transformed, and scattered back to their positions.
// Skipped rows take x's row when `passthrough` is set, zero otherwise.
// Padding rows flow through `f` but are never scattered, so they cannot
// affect the result as long as `f` maps rows independently.
template <typename S>
Tensor<S> execute_sparse(Tape<S>& tape, const Tensor<S>& x, const Mask& mask,
                         const GroupFn<S>& f, int64_t gsize,
                         bool passthrough) {
  SKL_CHECK_ARG(x.ndim() == 3, "execute_sparse: expected [B,T,d]");
  SKL_CHECK_ARG(mask.batch == x.dim(0) && mask.time == x.dim(1),
                "execute_sparse: mask extent mismatch");
  const GroupPlan plan = plan_groups(mask, gsize);
  const int64_t batch = x.dim(0), time = x.dim(1);
  if (plan.n_active == 0) {
    if (passthrough)
      return tape.scatter_rows({}, {}, {}, &x, batch, time);
    return Tensor<S>::zeros(x.shape());
  }
  std::vector<Tensor<S>> outs;
  std::vector<std::pair<int64_t, int64_t>> spans;
  outs.reserve(plan.groups.size());
  spans.reserve(plan.groups.size());
  // Run groups last-to-first: the tape replays in reverse, so shared-weight
  // gradients then accumulate in ascending row order — the same addition
  // chain a single dense call would produce.
  for (auto it = plan.groups.rbegin(); it != plan.groups.rend(); ++it) {
    const Group& g = *it;
    Tensor<S> block =
        tape.gather_rows(x, plan.rows.data() + g.begin, g.count, plan.gsize);
    Tensor<S> y = f(tape, block);
    SKL_CHECK(y.ndim() == 2 && y.dim(0) == plan.gsize,
              "execute_sparse: group fn must keep " +
                  std::to_string(plan.gsize) + " rows, got " +
                  shape_str(y.shape()));
    outs.push_back(std::move(y));
    spans.emplace_back(g.begin, g.count);
  }
  return tape.scatter_rows(outs, plan.rows, spans,
                           passthrough ? &x : nullptr, batch, time);
}

}  // namespace skiplayer
