#include "skiplayer/sparse.hpp"

#include <cmath>

namespace skiplayer {

GroupPlan plan_groups(const Mask& mask, int64_t gsize) {
  SKL_CHECK_ARG(gsize > 0, "group size must be positive, got " +
                               std::to_string(gsize));
  GroupPlan plan;
  plan.gsize = gsize;
  plan.rows.reserve(static_cast<size_t>(mask.count_on()));
  for (int64_t r = 0; r < mask.size(); ++r)
    if (mask.on[r]) plan.rows.push_back(r);
  plan.n_active = static_cast<int64_t>(plan.rows.size());
  for (int64_t begin = 0; begin < plan.n_active; begin += gsize) {
    plan.groups.push_back(
        Group{begin, std::min(gsize, plan.n_active - begin)});
  }
  return plan;
}

int64_t choose_gsize(double scale, double p_target, int64_t batch,
                     int64_t time) {
  SKL_CHECK_ARG(scale > 0.0, "group size scale must be positive");
  const double want = scale * p_target * static_cast<double>(batch) *
                      static_cast<double>(time);
  return std::max<int64_t>(1, std::llround(want));
}

}  // namespace skiplayer
