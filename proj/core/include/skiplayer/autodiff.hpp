#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "skiplayer/kernels.hpp"
#include "skiplayer/tensor.hpp"

namespace skiplayer {

// Reverse-mode tape. Ops compute forward immediately and, when the output
// requires grad, record a closure that scatters gradients back into the
// inputs. Records are naturally topological (an op's inputs always exist
// before it runs), so one reverse sweep visits each exactly once.
//
// The tape stays intact after backward(); a second backward() accumulates a
// second full pass of gradients on top of the first. Training code clears
// the tape (or builds a fresh one) each step and zeroes parameter grads.
template <typename S>
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<TensorNode<S>>> inputs;
    std::shared_ptr<TensorNode<S>> output;
    std::function<void()> backward;
  };

  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }
  const std::vector<Record>& records() const { return records_; }

  void backward(const Tensor<S>& loss) {
    SKL_CHECK_ARG(loss.numel() == 1,
                  "backward: loss must be scalar, got shape " +
                      shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.node()->grad[0] += S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->backward();
    }
  }

  // ---------------------------------------------------------------- basics

  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape("add", a, b);
    Tensor<S> out = make_out(a.shape(), {a, b});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
    record("add", {a, b}, out, [a, b, out]() {
      const S* g = out.grad();
      if (a.requires_grad()) {
        S* ga = a.node()->grad.data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        S* gb = b.node()->grad.data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += g[i];
      }
    });
    return out;
  }

  // a + c*b
  Tensor<S> add_scaled(const Tensor<S>& a, const Tensor<S>& b, S c) {
    check_same_shape("add_scaled", a, b);
    Tensor<S> out = make_out(a.shape(), {a, b});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + c * pb[i];
    record("add_scaled", {a, b}, out, [a, b, out, c]() {
      const S* g = out.grad();
      if (a.requires_grad()) {
        S* ga = a.node()->grad.data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        S* gb = b.node()->grad.data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += c * g[i];
      }
    });
    return out;
  }

  Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = make_out(a.shape(), {a});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = c * pa[i];
    record("scale", {a}, out, [a, out, c]() {
      if (!a.requires_grad()) return;
      const S* g = out.grad();
      S* ga = a.node()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += c * g[i];
    });
    return out;
  }

  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape("mul", a, b);
    Tensor<S> out = make_out(a.shape(), {a, b});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
    record("mul", {a, b}, out, [a, b, out]() {
      const S* g = out.grad();
      if (a.requires_grad()) {
        S* ga = a.node()->grad.data();
        const S* pb = b.data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += pb[i] * g[i];
      }
      if (b.requires_grad()) {
        S* gb = b.node()->grad.data();
        const S* pa = a.data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += pa[i] * g[i];
      }
    });
    return out;
  }

  // a: [..., m, k] @ b: [k, n] -> [..., m, n]; leading dims are flattened
  // into rows.
  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    SKL_CHECK_ARG(a.ndim() >= 2 && b.ndim() == 2,
                  "matmul: need a with >=2 dims and 2-d b, got " +
                      shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    const int64_t k = a.shape().back();
    SKL_CHECK_ARG(k == b.dim(0), "matmul: inner extents differ, " +
                                     shape_str(a.shape()) + " @ " +
                                     shape_str(b.shape()));
    const int64_t n = b.dim(1);
    const int64_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor<S> out = make_out(out_shape, {a, b});
    gemm(false, false, rows, n, k, S(1), a.data(), k, b.data(), n, S(0),
         out.data(), n);
    record("matmul", {a, b}, out, [a, b, out, rows, k, n]() {
      const S* g = out.grad();
      if (a.requires_grad()) {
        gemm(false, true, rows, k, n, S(1), g, n, b.data(), n, S(1),
             a.node()->grad.data(), k);
      }
      if (b.requires_grad()) {
        gemm(true, false, k, n, rows, S(1), a.data(), k, g, n, S(1),
             b.node()->grad.data(), n);
      }
    });
    return out;
  }

  // ------------------------------------------------------------ pointwise

  Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out = make_out(a.shape(), {a});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
    record("relu", {a}, out, [a, out]() {
      if (!a.requires_grad()) return;
      const S* g = out.grad();
      const S* pa = a.data();
      S* ga = a.node()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i)
        if (pa[i] > S(0)) ga[i] += g[i];
    });
    return out;
  }

  Tensor<S> gelu(const Tensor<S>& a) {
    Tensor<S> out = make_out(a.shape(), {a});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = gelu_scalar(pa[i]);
    record("gelu", {a}, out, [a, out]() {
      if (!a.requires_grad()) return;
      const S* g = out.grad();
      const S* pa = a.data();
      S* ga = a.node()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i)
        ga[i] += gelu_grad_scalar(pa[i]) * g[i];
    });
    return out;
  }

  Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out = make_out(a.shape(), {a});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = sigmoid_scalar(pa[i]);
    record("sigmoid", {a}, out, [a, out]() {
      if (!a.requires_grad()) return;
      const S* g = out.grad();
      const S* po = out.data();
      S* ga = a.node()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i)
        ga[i] += po[i] * (S(1) - po[i]) * g[i];
    });
    return out;
  }

  // --------------------------------------------------------- normalization

  Tensor<S> softmax_lastdim(const Tensor<S>& a) {
    SKL_CHECK_ARG(a.ndim() >= 1 && a.shape().back() >= 1,
                  "softmax: last extent must be >= 1");
    const int64_t n = a.shape().back();
    const int64_t rows = a.numel() / n;
    Tensor<S> out = make_out(a.shape(), {a});
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(pa + r * n, pa + (r + 1) * n, po + r * n);
      softmax_row(po + r * n, n);
    }
    record("softmax", {a}, out, [a, out, rows, n]() {
      if (!a.requires_grad()) return;
      const S* g = out.grad();
      const S* p = out.data();
      S* ga = a.node()->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* pr = p + r * n;
        const S* gr = g + r * n;
        S dot = 0;
        for (int64_t i = 0; i < n; ++i) dot += pr[i] * gr[i];
        S* gar = ga + r * n;
        for (int64_t i = 0; i < n; ++i) gar[i] += pr[i] * (gr[i] - dot);
      }
    });
    return out;
  }

  Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                       const Tensor<S>& bias, S eps) {
    const int64_t d = x.shape().back();
    SKL_CHECK_ARG(gain.numel() == d && bias.numel() == d,
                  "layer_norm: gain/bias length must match last extent " +
                      std::to_string(d));
    SKL_CHECK_ARG(eps > S(0), "layer_norm: eps must be positive");
    const int64_t rows = x.numel() / d;
    Tensor<S> out = make_out(x.shape(), {x, gain, bias});
    auto mean = std::make_shared<std::vector<S>>(rows);
    auto rstd = std::make_shared<std::vector<S>>(rows);
    for (int64_t r = 0; r < rows; ++r) {
      layer_norm_row(x.data() + r * d, gain.data(), bias.data(), eps, d,
                     out.data() + r * d, mean->data() + r, rstd->data() + r);
    }
    record("layer_norm", {x, gain, bias}, out,
           [x, gain, bias, out, mean, rstd, rows, d]() {
             const S* g = out.grad();
             const S* px = x.data();
             const S* pg = gain.data();
             for (int64_t r = 0; r < rows; ++r) {
               const S mu = (*mean)[r];
               const S rs = (*rstd)[r];
               const S* xr = px + r * d;
               const S* gr = g + r * d;
               if (gain.requires_grad() || bias.requires_grad()) {
                 S* ggain = gain.requires_grad() ? gain.node()->grad.data() : nullptr;
                 S* gbias = bias.requires_grad() ? bias.node()->grad.data() : nullptr;
                 for (int64_t i = 0; i < d; ++i) {
                   const S xhat = (xr[i] - mu) * rs;
                   if (ggain) ggain[i] += gr[i] * xhat;
                   if (gbias) gbias[i] += gr[i];
                 }
               }
               if (x.requires_grad()) {
                 S s1 = 0, s2 = 0;
                 for (int64_t i = 0; i < d; ++i) {
                   const S xhat = (xr[i] - mu) * rs;
                   const S gdy = pg[i] * gr[i];
                   s1 += gdy;
                   s2 += gdy * xhat;
                 }
                 s1 /= static_cast<S>(d);
                 s2 /= static_cast<S>(d);
                 S* gx = x.node()->grad.data() + r * d;
                 for (int64_t i = 0; i < d; ++i) {
                   const S xhat = (xr[i] - mu) * rs;
                   const S gdy = pg[i] * gr[i];
                   gx[i] += rs * (gdy - s1 - xhat * s2);
                 }
               }
             }
           });
    return out;
  }

  // ------------------------------------------------------------ reductions

  Tensor<S> sum(const Tensor<S>& a) {
    Tensor<S> out = make_out({1}, {a});
    S acc = 0;
    const S* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc;
    record("sum", {a}, out, [a, out]() {
      if (!a.requires_grad()) return;
      const S g = out.grad()[0];
      S* ga = a.node()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
    });
    return out;
  }

  // mean over all leading positions of component `c` of the last dim
  Tensor<S> mean_component_lastdim(const Tensor<S>& a, int64_t c) {
    const int64_t n = a.shape().back();
    SKL_CHECK_ARG(c >= 0 && c < n, "mean_component: index out of range");
    const int64_t rows = a.numel() / n;
    Tensor<S> out = make_out({1}, {a});
    S acc = 0;
    const S* pa = a.data();
    for (int64_t r = 0; r < rows; ++r) acc += pa[r * n + c];
    out.data()[0] = acc / static_cast<S>(rows);
    record("mean_component", {a}, out, [a, out, rows, n, c]() {
      if (!a.requires_grad()) return;
      const S g = out.grad()[0] / static_cast<S>(rows);
      S* ga = a.node()->grad.data();
      for (int64_t r = 0; r < rows; ++r) ga[r * n + c] += g;
    });
    return out;
  }

  // sum_i (r_i - target)^2 over scalar inputs
  Tensor<S> sq_deviation_sum(const std::vector<Tensor<S>>& rs, S target) {
    for (const auto& r : rs)
      SKL_CHECK_ARG(r.numel() == 1, "sq_deviation_sum: inputs must be scalar");
    Tensor<S> out = make_out({1}, rs);
    S acc = 0;
    for (const auto& r : rs) {
      const S dlt = r.data()[0] - target;
      acc += dlt * dlt;
    }
    out.data()[0] = acc;
    record("sq_deviation_sum", rs, out, [rs, out, target]() {
      const S g = out.grad()[0];
      for (const auto& r : rs) {
        if (!r.requires_grad()) continue;
        r.node()->grad[0] += S(2) * (r.data()[0] - target) * g;
      }
    });
    return out;
  }

  // --------------------------------------------------------------- lookups

  Tensor<S> embedding(const std::vector<int32_t>& ids, int64_t batch,
                      int64_t time, const Tensor<S>& table) {
    SKL_CHECK_ARG(static_cast<int64_t>(ids.size()) == batch * time,
                  "embedding: ids length does not match batch*time");
    const int64_t vocab = table.dim(0);
    const int64_t d = table.dim(1);
    for (int32_t id : ids)
      SKL_CHECK_ARG(id >= 0 && id < vocab,
                    "embedding: token id " + std::to_string(id) +
                        " out of range for vocab " + std::to_string(vocab));
    Tensor<S> out = make_out({batch, time, d}, {table});
    for (int64_t r = 0; r < batch * time; ++r) {
      std::copy(table.data() + ids[r] * d, table.data() + (ids[r] + 1) * d,
                out.data() + r * d);
    }
    record("embedding", {table}, out, [table, out, ids, batch, time, d]() {
      if (!table.requires_grad()) return;
      const S* g = out.grad();
      S* gt = table.node()->grad.data();
      for (int64_t r = 0; r < batch * time; ++r) {
        S* row = gt + ids[r] * d;
        const S* gr = g + r * d;
        for (int64_t i = 0; i < d; ++i) row[i] += gr[i];
      }
    });
    return out;
  }

  // out[b,t,:] = a[b,t,:] + table[t,:]  (shared across the batch)
  Tensor<S> add_rows(const Tensor<S>& a, const Tensor<S>& table) {
    SKL_CHECK_ARG(a.ndim() == 3, "add_rows: expected [B,T,d]");
    const int64_t batch = a.dim(0), time = a.dim(1), d = a.dim(2);
    SKL_CHECK_ARG(table.ndim() == 2 && table.dim(1) == d && table.dim(0) >= time,
                  "add_rows: table " + shape_str(table.shape()) +
                      " incompatible with input " + shape_str(a.shape()));
    Tensor<S> out = make_out(a.shape(), {a, table});
    const S* pa = a.data();
    const S* pt = table.data();
    S* po = out.data();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t t = 0; t < time; ++t) {
        const int64_t r = (b * time + t) * d;
        for (int64_t i = 0; i < d; ++i) po[r + i] = pa[r + i] + pt[t * d + i];
      }
    record("add_rows", {a, table}, out, [a, table, out, batch, time, d]() {
      const S* g = out.grad();
      if (a.requires_grad()) {
        S* ga = a.node()->grad.data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (table.requires_grad()) {
        S* gt = table.node()->grad.data();
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t t = 0; t < time; ++t) {
            const S* gr = g + (b * time + t) * d;
            for (int64_t i = 0; i < d; ++i) gt[t * d + i] += gr[i];
          }
      }
    });
    return out;
  }

  // ------------------------------------------------------------------ loss

  // Mean over masked positions of -log softmax(logits)[target].
  Tensor<S> cross_entropy_mean(const Tensor<S>& logits,
                               const std::vector<int32_t>& targets,
                               const std::vector<uint8_t>& mask) {
    SKL_CHECK_ARG(logits.ndim() == 3, "cross_entropy: expected [B,T,V] logits");
    const int64_t vocab = logits.shape().back();
    const int64_t rows = logits.numel() / vocab;
    SKL_CHECK_ARG(static_cast<int64_t>(targets.size()) == rows &&
                      static_cast<int64_t>(mask.size()) == rows,
                  "cross_entropy: targets/mask length mismatch");
    int64_t count = 0;
    for (uint8_t m : mask) count += (m != 0);
    SKL_CHECK_ARG(count > 0, "cross_entropy: mask selects no positions");
    auto probs = std::make_shared<std::vector<S>>(
        static_cast<size_t>(rows) * static_cast<size_t>(vocab));
    const S* pl = logits.data();
    S loss = 0;
    for (int64_t r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      const int32_t tgt = targets[r];
      SKL_CHECK_ARG(tgt >= 0 && tgt < vocab,
                    "cross_entropy: target id " + std::to_string(tgt) +
                        " out of range for vocab " + std::to_string(vocab));
      const S* row = pl + r * vocab;
      S* prow = probs->data() + r * vocab;
      std::copy(row, row + vocab, prow);
      softmax_row(prow, vocab);
      // recompute the stable log-prob directly rather than log(prob)
      S mx = row[0];
      for (int64_t i = 1; i < vocab; ++i) mx = row[i] > mx ? row[i] : mx;
      S se = 0;
      for (int64_t i = 0; i < vocab; ++i) se += std::exp(row[i] - mx);
      loss += (mx + std::log(se)) - row[tgt];
    }
    Tensor<S> out = make_out({1}, {logits});
    out.data()[0] = loss / static_cast<S>(count);
    record("cross_entropy", {logits}, out,
           [logits, out, probs, targets, mask, rows, vocab, count]() {
             if (!logits.requires_grad()) return;
             const S g = out.grad()[0] / static_cast<S>(count);
             S* gl = logits.node()->grad.data();
             for (int64_t r = 0; r < rows; ++r) {
               if (!mask[r]) continue;
               const S* prow = probs->data() + r * vocab;
               S* grow = gl + r * vocab;
               for (int64_t i = 0; i < vocab; ++i) grow[i] += prow[i] * g;
               grow[targets[r]] -= g;
             }
           });
    return out;
  }

  // ------------------------------------------------- masked row operations

  // Rows with mask on get x @ w; rows with mask off become zero and cost no
  // compute. Packing order is row-major over (b,t).
  Tensor<S> masked_linear(const Tensor<S>& x, const Tensor<S>& w,
                          const Mask& mask) {
    SKL_CHECK_ARG(x.ndim() == 3, "masked_linear: expected [B,T,d]");
    const int64_t d = x.dim(2);
    SKL_CHECK_ARG(w.ndim() == 2 && w.dim(0) == d,
                  "masked_linear: weight " + shape_str(w.shape()) +
                      " incompatible with input " + shape_str(x.shape()));
    SKL_CHECK_ARG(mask.batch == x.dim(0) && mask.time == x.dim(1),
                  "masked_linear: mask extent mismatch");
    const int64_t n = w.dim(1);
    auto rows = std::make_shared<std::vector<int64_t>>();
    rows->reserve(static_cast<size_t>(mask.count_on()));
    for (int64_t r = 0; r < mask.size(); ++r)
      if (mask.on[r]) rows->push_back(r);
    const int64_t p = static_cast<int64_t>(rows->size());
    Tensor<S> out = make_out({x.dim(0), x.dim(1), n}, {x, w});
    if (p > 0) {
      std::vector<S> xp(static_cast<size_t>(p) * d);
      for (int64_t r = 0; r < p; ++r)
        std::copy(x.data() + (*rows)[r] * d, x.data() + ((*rows)[r] + 1) * d,
                  xp.data() + r * d);
      std::vector<S> yp(static_cast<size_t>(p) * n);
      gemm(false, false, p, n, d, S(1), xp.data(), d, w.data(), n, S(0),
           yp.data(), n);
      for (int64_t r = 0; r < p; ++r)
        std::copy(yp.data() + r * n, yp.data() + (r + 1) * n,
                  out.data() + (*rows)[r] * n);
    }
    record("masked_linear", {x, w}, out, [x, w, out, rows, d, n]() {
      const int64_t p = static_cast<int64_t>(rows->size());
      if (p == 0) return;
      std::vector<S> gy(static_cast<size_t>(p) * n);
      for (int64_t r = 0; r < p; ++r)
        std::copy(out.grad() + (*rows)[r] * n, out.grad() + ((*rows)[r] + 1) * n,
                  gy.data() + r * n);
      if (w.requires_grad()) {
        std::vector<S> xp(static_cast<size_t>(p) * d);
        for (int64_t r = 0; r < p; ++r)
          std::copy(x.data() + (*rows)[r] * d,
                    x.data() + ((*rows)[r] + 1) * d, xp.data() + r * d);
        gemm(true, false, d, n, p, S(1), xp.data(), d, gy.data(), n, S(1),
             w.node()->grad.data(), n);
      }
      if (x.requires_grad()) {
        std::vector<S> gx(static_cast<size_t>(p) * d);
        gemm(false, true, p, d, n, S(1), gy.data(), n, w.data(), n, S(0),
             gx.data(), d);
        S* gxf = x.node()->grad.data();
        for (int64_t r = 0; r < p; ++r) {
          const S* src = gx.data() + r * d;
          S* dst = gxf + (*rows)[r] * d;
          for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
      }
    });
    return out;
  }

  // Rows with mask on take a's row, the rest take b's row.
  Tensor<S> select_rows(const Tensor<S>& a, const Tensor<S>& b,
                        const Mask& mask) {
    check_same_shape("select_rows", a, b);
    SKL_CHECK_ARG(a.ndim() == 3 && mask.batch == a.dim(0) &&
                      mask.time == a.dim(1),
                  "select_rows: mask extent mismatch");
    const int64_t d = a.dim(2);
    Tensor<S> out = make_out(a.shape(), {a, b});
    for (int64_t r = 0; r < mask.size(); ++r) {
      const S* src = mask.on[r] ? a.data() + r * d : b.data() + r * d;
      std::copy(src, src + d, out.data() + r * d);
    }
    record("select_rows", {a, b}, out, [a, b, out, mask, d]() {
      const S* g = out.grad();
      for (int64_t r = 0; r < mask.size(); ++r) {
        const Tensor<S>& dst = mask.on[r] ? a : b;
        if (!dst.requires_grad()) continue;
        S* gd = dst.node()->grad.data() + r * d;
        const S* gr = g + r * d;
        for (int64_t i = 0; i < d; ++i) gd[i] += gr[i];
      }
    });
    return out;
  }

  // Rows with mask off are zeroed; the rest pass through.
  Tensor<S> zero_masked_rows(const Tensor<S>& x, const Mask& mask) {
    SKL_CHECK_ARG(x.ndim() == 3 && mask.batch == x.dim(0) &&
                      mask.time == x.dim(1),
                  "zero_masked_rows: mask extent mismatch");
    const int64_t d = x.dim(2);
    Tensor<S> out = make_out(x.shape(), {x});
    for (int64_t r = 0; r < mask.size(); ++r) {
      if (mask.on[r])
        std::copy(x.data() + r * d, x.data() + (r + 1) * d, out.data() + r * d);
    }
    record("zero_masked_rows", {x}, out, [x, out, mask, d]() {
      if (!x.requires_grad()) return;
      const S* g = out.grad();
      S* gx = x.node()->grad.data();
      for (int64_t r = 0; r < mask.size(); ++r) {
        if (!mask.on[r]) continue;
        for (int64_t i = 0; i < d; ++i) gx[r * d + i] += g[r * d + i];
      }
    });
    return out;
  }

  // ------------------------------------------------------ gather / scatter

  // Pack `count` rows of x (flattened to [R, d]) into a [pad_to, d] block;
  // rows past `count` are zero padding.
  Tensor<S> gather_rows(const Tensor<S>& x, const int64_t* row_ids,
                        int64_t count, int64_t pad_to) {
    const int64_t d = x.shape().back();
    SKL_CHECK_ARG(count <= pad_to, "gather_rows: count exceeds pad_to");
    Tensor<S> out = make_out({pad_to, d}, {x});
    std::vector<int64_t> rows(row_ids, row_ids + count);
    for (int64_t r = 0; r < count; ++r)
      std::copy(x.data() + rows[r] * d, x.data() + (rows[r] + 1) * d,
                out.data() + r * d);
    record("gather_rows", {x}, out, [x, out, rows = std::move(rows), d]() {
      if (!x.requires_grad()) return;
      const S* g = out.grad();
      S* gx = x.node()->grad.data();
      for (size_t r = 0; r < rows.size(); ++r) {
        S* dst = gx + rows[r] * d;
        const S* src = g + static_cast<int64_t>(r) * d;
        for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
      }
    });
    return out;
  }

  // Scatter per-group rows back into a [B,T,n] tensor. `rows` lists the
  // destination row for every gathered entry, `spans` gives (begin, count)
  // into `rows` per group; padding rows of each group are never written.
  // Rows not covered by any group take the passthrough's row when given,
  // zero otherwise.
  Tensor<S> scatter_rows(const std::vector<Tensor<S>>& groups,
                         const std::vector<int64_t>& rows,
                         const std::vector<std::pair<int64_t, int64_t>>& spans,
                         const Tensor<S>* passthrough, int64_t batch,
                         int64_t time) {
    SKL_CHECK_ARG(!groups.empty() || passthrough != nullptr || batch * time == 0 ||
                      rows.empty(),
                  "scatter_rows: nothing to scatter");
    const int64_t n = groups.empty()
                          ? (passthrough ? passthrough->shape().back() : 0)
                          : groups[0].shape().back();
    std::vector<Tensor<S>> inputs = groups;
    if (passthrough) {
      SKL_CHECK_ARG(passthrough->shape().back() == n || groups.empty(),
                    "scatter_rows: passthrough width mismatch");
      inputs.push_back(*passthrough);
    }
    Tensor<S> out = make_out({batch, time, n}, inputs);
    auto covered = std::make_shared<std::vector<uint8_t>>(
        static_cast<size_t>(batch * time), uint8_t{0});
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const auto [begin, count] = spans[gi];
      for (int64_t r = 0; r < count; ++r) {
        const int64_t dst = rows[begin + r];
        (*covered)[dst] = 1;
        std::copy(groups[gi].data() + r * n, groups[gi].data() + (r + 1) * n,
                  out.data() + dst * n);
      }
    }
    if (passthrough) {
      for (int64_t r = 0; r < batch * time; ++r) {
        if (!(*covered)[r])
          std::copy(passthrough->data() + r * n,
                    passthrough->data() + (r + 1) * n, out.data() + r * n);
      }
    }
    const bool has_pass = passthrough != nullptr;
    Tensor<S> pass = has_pass ? *passthrough : Tensor<S>();
    record("scatter_rows", inputs, out,
           [groups, rows, spans, pass, has_pass, out, covered, batch, time, n]() {
             const S* g = out.grad();
             for (size_t gi = 0; gi < groups.size(); ++gi) {
               if (!groups[gi].requires_grad()) continue;
               const auto [begin, count] = spans[gi];
               S* gg = groups[gi].node()->grad.data();
               for (int64_t r = 0; r < count; ++r) {
                 const S* src = g + rows[begin + r] * n;
                 S* dst = gg + r * n;
                 for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
               }
             }
             if (has_pass && pass.requires_grad()) {
               S* gp = pass.node()->grad.data();
               for (int64_t r = 0; r < batch * time; ++r) {
                 if ((*covered)[r]) continue;
                 for (int64_t i = 0; i < n; ++i) gp[r * n + i] += g[r * n + i];
               }
             }
           });
    return out;
  }

 private:
  Tensor<S> make_out(Shape shape, const std::vector<Tensor<S>>& inputs) {
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    return Tensor<S>::zeros(std::move(shape), rg);
  }

  template <class F>
  void record(const char* op, const std::vector<Tensor<S>>& inputs,
              const Tensor<S>& out, F&& fn) {
    if (!out.requires_grad()) return;
    Record rec;
    rec.op = op;
    rec.inputs.reserve(inputs.size());
    for (const auto& t : inputs) rec.inputs.push_back(t.node());
    rec.output = out.node();
    rec.backward = std::forward<F>(fn);
    records_.push_back(std::move(rec));
  }

  static void check_same_shape(const char* op, const Tensor<S>& a,
                               const Tensor<S>& b) {
    SKL_CHECK_ARG(a.shape() == b.shape(),
                  std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }

  std::vector<Record> records_;

 public:
  // ------------------------------------------------- model-specific fusions
  // (defined after the private helpers so they can use them)

  // Multi-head causal attention over projected q/k/v with query-side
  // masking: rows with mask off produce zero output and never form queries
  // or attention weights. All positions (masked or not) remain visible as
  // keys/values. Scores are scaled by 1/sqrt(head_dim).
  Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k,
                             const Tensor<S>& v, const Mask& mask,
                             int64_t heads) {
    SKL_CHECK_ARG(q.ndim() == 3, "causal_attention: expected [B,T,d]");
    const int64_t batch = q.dim(0), time = q.dim(1), d = q.dim(2);
    SKL_CHECK_ARG(k.shape() == q.shape() && v.shape() == q.shape(),
                  "causal_attention: q/k/v shapes differ");
    SKL_CHECK_ARG(d % heads == 0, "causal_attention: dim not divisible by heads");
    SKL_CHECK_ARG(mask.batch == batch && mask.time == time,
                  "causal_attention: mask extent mismatch");
    const int64_t hd = d / heads;
    const S alpha = S(1) / std::sqrt(static_cast<S>(hd));

    auto act = std::make_shared<std::vector<std::vector<int64_t>>>(batch);
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t t = 0; t < time; ++t)
        if (mask.at(b, t)) (*act)[b].push_back(t);
    }
    // softmaxed scores, packed per (b, head): p x time
    auto probs = std::make_shared<std::vector<std::vector<S>>>(
        static_cast<size_t>(batch * heads));

    Tensor<S> out = make_out(q.shape(), {q, k, v});
    std::vector<S> qp, sc, op;
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t p = static_cast<int64_t>((*act)[b].size());
      if (p == 0) continue;
      for (int64_t h = 0; h < heads; ++h) {
        const S* kbh = k.data() + (b * time) * d + h * hd;
        const S* vbh = v.data() + (b * time) * d + h * hd;
        qp.assign(static_cast<size_t>(p) * hd, S(0));
        for (int64_t r = 0; r < p; ++r)
          std::copy(q.data() + (b * time + (*act)[b][r]) * d + h * hd,
                    q.data() + (b * time + (*act)[b][r]) * d + h * hd + hd,
                    qp.data() + r * hd);
        sc.assign(static_cast<size_t>(p) * time, S(0));
        gemm(false, true, p, time, hd, alpha, qp.data(), hd, kbh, d, S(0),
             sc.data(), time);
        for (int64_t r = 0; r < p; ++r) {
          const int64_t t = (*act)[b][r];
          S* row = sc.data() + r * time;
          softmax_row(row, t + 1);
          std::fill(row + t + 1, row + time, S(0));
        }
        (*probs)[b * heads + h] = sc;
        op.assign(static_cast<size_t>(p) * hd, S(0));
        gemm(false, false, p, hd, time, S(1), sc.data(), time, vbh, d, S(0),
             op.data(), hd);
        for (int64_t r = 0; r < p; ++r)
          std::copy(op.data() + r * hd, op.data() + (r + 1) * hd,
                    out.data() + (b * time + (*act)[b][r]) * d + h * hd);
      }
    }
    record("causal_attention", {q, k, v}, out,
           [q, k, v, out, act, probs, batch, time, d, heads, hd, alpha]() {
             std::vector<S> qp, go, gp, gs, gq;
             for (int64_t b = 0; b < batch; ++b) {
               const int64_t p = static_cast<int64_t>((*act)[b].size());
               if (p == 0) continue;
               for (int64_t h = 0; h < heads; ++h) {
                 const std::vector<S>& pr = (*probs)[b * heads + h];
                 const S* kbh = k.data() + (b * time) * d + h * hd;
                 const S* vbh = v.data() + (b * time) * d + h * hd;
                 go.assign(static_cast<size_t>(p) * hd, S(0));
                 for (int64_t r = 0; r < p; ++r)
                   std::copy(
                       out.grad() + (b * time + (*act)[b][r]) * d + h * hd,
                       out.grad() + (b * time + (*act)[b][r]) * d + h * hd + hd,
                       go.data() + r * hd);
                 // dP = dO @ V^T
                 gp.assign(static_cast<size_t>(p) * time, S(0));
                 gemm(false, true, p, time, hd, S(1), go.data(), hd, vbh, d,
                      S(0), gp.data(), time);
                 // dS = P .* (dP - rowdot(dP, P))
                 gs.assign(static_cast<size_t>(p) * time, S(0));
                 for (int64_t r = 0; r < p; ++r) {
                   const S* prow = pr.data() + r * time;
                   const S* gprow = gp.data() + r * time;
                   S dot = 0;
                   for (int64_t j = 0; j < time; ++j) dot += prow[j] * gprow[j];
                   S* gsrow = gs.data() + r * time;
                   for (int64_t j = 0; j < time; ++j)
                     gsrow[j] = prow[j] * (gprow[j] - dot);
                 }
                 qp.assign(static_cast<size_t>(p) * hd, S(0));
                 for (int64_t r = 0; r < p; ++r)
                   std::copy(q.data() + (b * time + (*act)[b][r]) * d + h * hd,
                             q.data() + (b * time + (*act)[b][r]) * d + h * hd +
                                 hd,
                             qp.data() + r * hd);
                 if (v.requires_grad()) {
                   gemm(true, false, time, hd, p, S(1), pr.data(), time,
                        go.data(), hd, S(1),
                        v.node()->grad.data() + (b * time) * d + h * hd, d);
                 }
                 if (k.requires_grad()) {
                   gemm(true, false, time, hd, p, alpha, gs.data(), time,
                        qp.data(), hd, S(1),
                        k.node()->grad.data() + (b * time) * d + h * hd, d);
                 }
                 if (q.requires_grad()) {
                   gq.assign(static_cast<size_t>(p) * hd, S(0));
                   gemm(false, false, p, hd, time, alpha, gs.data(), time, kbh,
                        d, S(0), gq.data(), hd);
                   S* gqf = q.node()->grad.data();
                   for (int64_t r = 0; r < p; ++r) {
                     S* dst = gqf + (b * time + (*act)[b][r]) * d + h * hd;
                     const S* src = gq.data() + r * hd;
                     for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                   }
                 }
               }
             }
           });
    return out;
  }

  // Straight-through combine. Forward copies layer_out rows where the mask
  // is on and x rows where it is off, so the realized value depends only on
  // the hard decisions. Backward follows the branch-selected soft scaling:
  // an executed row behaves like g1*layer_out, a skipped row like g0*x.
  // With `soft` set the forward applies the soft scaling too, which makes
  // the whole function smooth; finite-difference oracles run in that mode.
  Tensor<S> st_combine(const Tensor<S>& layer_out, const Tensor<S>& x,
                       const Tensor<S>& g, const Mask& mask,
                       bool soft = false) {
    SKL_CHECK_ARG(layer_out.shape() == x.shape(),
                  "st_combine: shape mismatch " + shape_str(layer_out.shape()) +
                      " vs " + shape_str(x.shape()));
    SKL_CHECK_ARG(x.ndim() == 3 && mask.batch == x.dim(0) &&
                      mask.time == x.dim(1),
                  "st_combine: mask extent mismatch");
    SKL_CHECK_ARG(g.ndim() == 3 && g.dim(0) == x.dim(0) &&
                      g.dim(1) == x.dim(1) && g.dim(2) == 2,
                  "st_combine: g must be [B,T,2]");
    const int64_t d = x.dim(2);
    Tensor<S> out = make_out(x.shape(), {layer_out, x, g});
    for (int64_t r = 0; r < mask.size(); ++r) {
      const S* src = mask.on[r] ? layer_out.data() + r * d : x.data() + r * d;
      S* dst = out.data() + r * d;
      if (soft) {
        const S coeff = g.data()[r * 2 + (mask.on[r] ? 1 : 0)];
        for (int64_t i = 0; i < d; ++i) dst[i] = coeff * src[i];
      } else {
        std::copy(src, src + d, dst);
      }
    }
    record("st_combine", {layer_out, x, g}, out,
           [layer_out, x, g, out, mask, d, soft]() {
             const S* go = out.grad();
             for (int64_t r = 0; r < mask.size(); ++r) {
               const S* grow = go + r * d;
               if (mask.on[r]) {
                 const S coeff = soft ? g.data()[r * 2 + 1] : S(1);
                 if (layer_out.requires_grad()) {
                   S* gl = layer_out.node()->grad.data() + r * d;
                   for (int64_t i = 0; i < d; ++i) gl[i] += coeff * grow[i];
                 }
                 if (g.requires_grad()) {
                   const S* lrow = layer_out.data() + r * d;
                   S dot = 0;
                   for (int64_t i = 0; i < d; ++i) dot += grow[i] * lrow[i];
                   g.node()->grad[r * 2 + 1] += dot;
                 }
               } else {
                 const S coeff = soft ? g.data()[r * 2 + 0] : S(1);
                 if (x.requires_grad()) {
                   S* gx = x.node()->grad.data() + r * d;
                   for (int64_t i = 0; i < d; ++i) gx[i] += coeff * grow[i];
                 }
                 if (g.requires_grad()) {
                   const S* xrow = x.data() + r * d;
                   S dot = 0;
                   for (int64_t i = 0; i < d; ++i) dot += grow[i] * xrow[i];
                   g.node()->grad[r * 2 + 0] += dot;
                 }
               }
             }
           });
    return out;
  }

  // g:[B,T,2] from the second logit column: g1 = sigmoid(z1), g0 = 1 - g1.
  Tensor<S> sigmoid_gate_pair(const Tensor<S>& logits) {
    SKL_CHECK_ARG(logits.ndim() == 3 && logits.shape().back() == 2,
                  "sigmoid_gate_pair: expected [B,T,2] logits");
    const int64_t rows = logits.numel() / 2;
    Tensor<S> out = make_out(logits.shape(), {logits});
    for (int64_t r = 0; r < rows; ++r) {
      const S p = sigmoid_scalar(logits.data()[r * 2 + 1]);
      out.data()[r * 2 + 1] = p;
      out.data()[r * 2 + 0] = S(1) - p;
    }
    record("sigmoid_gate_pair", {logits}, out, [logits, out, rows]() {
      if (!logits.requires_grad()) return;
      const S* g = out.grad();
      S* gl = logits.node()->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S p = out.data()[r * 2 + 1];
        gl[r * 2 + 1] += (g[r * 2 + 1] - g[r * 2 + 0]) * p * (S(1) - p);
      }
    });
    return out;
  }

  // Highway blend: out = t*h + (1-t)*carry with t = sigmoid(z), z:[B,T,1].
  Tensor<S> highway_blend(const Tensor<S>& h, const Tensor<S>& carry,
                          const Tensor<S>& z) {
    SKL_CHECK_ARG(h.shape() == carry.shape(), "highway_blend: shape mismatch");
    SKL_CHECK_ARG(z.ndim() == 3 && z.shape().back() == 1 &&
                      z.dim(0) == h.dim(0) && z.dim(1) == h.dim(1),
                  "highway_blend: gate must be [B,T,1]");
    const int64_t d = h.shape().back();
    const int64_t rows = h.numel() / d;
    auto gate = std::make_shared<std::vector<S>>(rows);
    Tensor<S> out = make_out(h.shape(), {h, carry, z});
    for (int64_t r = 0; r < rows; ++r) {
      const S t = sigmoid_scalar(z.data()[r]);
      (*gate)[r] = t;
      const S* ph = h.data() + r * d;
      const S* pc = carry.data() + r * d;
      S* po = out.data() + r * d;
      for (int64_t i = 0; i < d; ++i) po[i] = t * ph[i] + (S(1) - t) * pc[i];
    }
    record("highway_blend", {h, carry, z}, out,
           [h, carry, z, out, gate, rows, d]() {
             const S* g = out.grad();
             for (int64_t r = 0; r < rows; ++r) {
               const S t = (*gate)[r];
               const S* grow = g + r * d;
               if (h.requires_grad()) {
                 S* gh = h.node()->grad.data() + r * d;
                 for (int64_t i = 0; i < d; ++i) gh[i] += t * grow[i];
               }
               if (carry.requires_grad()) {
                 S* gc = carry.node()->grad.data() + r * d;
                 for (int64_t i = 0; i < d; ++i) gc[i] += (S(1) - t) * grow[i];
               }
               if (z.requires_grad()) {
                 const S* ph = h.data() + r * d;
                 const S* pc = carry.data() + r * d;
                 S dot = 0;
                 for (int64_t i = 0; i < d; ++i)
                   dot += grow[i] * (ph[i] - pc[i]);
                 z.node()->grad[r] += t * (S(1) - t) * dot;
               }
             }
           });
    return out;
  }
};

}  // namespace skiplayer
