#pragma once

#include <cblas.h>

#include <cmath>
#include <cstdint>

namespace skiplayer {

// C[m,n] = alpha * op(A) @ op(B) + beta * C, row-major.
//
// float goes through BLAS. double uses a fixed-order kernel: every output
// element is accumulated over k in ascending order, independent of m, so a
// gathered subset of rows reproduces the corresponding dense rows bit for
// bit. The f64 oracle and grad-check paths rely on this.
inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                 float alpha, const float* a, int64_t lda, const float* b,
                 int64_t ldb, float beta, float* c, int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                 double alpha, const double* a, int64_t lda, const double* b,
                 int64_t ldb, double beta, double* c, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    } else if (beta != 1.0) {
      for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int64_t p = 0; p < k; ++p) {
      const double aip = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
      if (trans_b) {
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * b[j * ldb + p];
      } else {
        const double* brow = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
}

// Shared row kernels. Training-forward and the decode path both call these,
// which keeps the two numerically aligned.

template <typename S>
void layer_norm_row(const S* x, const S* gain, const S* bias, S eps, int64_t d,
                    S* out, S* mean_out = nullptr, S* rstd_out = nullptr) {
  S mu = 0;
  for (int64_t i = 0; i < d; ++i) mu += x[i];
  mu /= static_cast<S>(d);
  S var = 0;
  for (int64_t i = 0; i < d; ++i) {
    const S c = x[i] - mu;
    var += c * c;
  }
  var /= static_cast<S>(d);
  const S rstd = S(1) / std::sqrt(var + eps);
  for (int64_t i = 0; i < d; ++i) out[i] = (x[i] - mu) * rstd * gain[i] + bias[i];
  if (mean_out) *mean_out = mu;
  if (rstd_out) *rstd_out = rstd;
}

// in-place softmax with max subtraction
template <typename S>
void softmax_row(S* p, int64_t n) {
  S mx = p[0];
  for (int64_t i = 1; i < n; ++i) mx = p[i] > mx ? p[i] : mx;
  S sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - mx);
    sum += p[i];
  }
  const S inv = S(1) / sum;
  for (int64_t i = 0; i < n; ++i) p[i] *= inv;
}

// GPT-2 style tanh-approximated GELU
template <typename S>
S gelu_scalar(S x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S u = c * (x + static_cast<S>(0.044715) * x * x * x);
  return static_cast<S>(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  const S u = c * (x + static_cast<S>(0.044715) * x * x * x);
  const S t = std::tanh(u);
  const S du = c * (S(1) + static_cast<S>(3.0 * 0.044715) * x * x);
  return static_cast<S>(0.5) * (S(1) + t) +
         static_cast<S>(0.5) * x * (S(1) - t * t) * du;
}

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= 0) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace skiplayer
