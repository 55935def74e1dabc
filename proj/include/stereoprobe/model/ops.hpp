#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>

#include "stereoprobe/model/tensor.hpp"

namespace stereoprobe {

// tanh approximation of x * Phi(x), as used by GPT-2.
template <typename T>
T gelu(T x) {
  constexpr T kCoeff = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kCubic = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x *
         (static_cast<T>(1) + std::tanh(kCoeff * (x + kCubic * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T kCoeff = static_cast<T>(0.7978845608028654);
  constexpr T kCubic = static_cast<T>(0.044715);
  const T inner = kCoeff * (x + kCubic * x * x * x);
  const T t = std::tanh(inner);
  const T d_inner = kCoeff * (static_cast<T>(1) + 3 * kCubic * x * x);
  return static_cast<T>(0.5) * (static_cast<T>(1) + t) +
         static_cast<T>(0.5) * x * (static_cast<T>(1) - t * t) * d_inner;
}

// Exact GELU via the error function.
inline double gelu_exact(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

// Layer normalization with double-precision statistics. The epsilon inside
// the square root keeps zero-variance input finite (it maps to beta).
inline void layer_norm(std::span<const float> x, std::span<const float> gamma,
                       std::span<const float> beta, double eps,
                       std::span<float> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x) {
    const double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>((x[i] - mean) * inv) * gamma[i] + beta[i];
  }
}

// In-place softmax with max subtraction; exponentials and the normalizer are
// accumulated in double.
inline void softmax_inplace(std::span<float> x) {
  if (x.empty()) return;
  const float max_v = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (float v : x) sum += std::exp(static_cast<double>(v) - max_v);
  for (float& v : x) {
    v = static_cast<float>(std::exp(static_cast<double>(v) - max_v) / sum);
  }
}

// log(sum(exp(x))) in double.
inline double log_sum_exp(std::span<const float> x) {
  const float max_v = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (float v : x) sum += std::exp(static_cast<double>(v) - max_v);
  return max_v + std::log(sum);
}

// Dot product with a fixed 8-way partial-sum order, so the result depends
// only on the two operands.
inline float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// out[r, :] = x[r, :] @ w + bias for r in [0, rows). w is [in x out].
// Each output element accumulates over k in ascending order regardless of
// how many rows are processed together, so a row's result never depends on
// the other rows of the batch.
inline void linear(const float* x, std::size_t rows, const float* wd,
                   std::size_t in, std::size_t cols, const float* bias,
                   float* out) {
  constexpr std::size_t kRowBlock = 4;
  constexpr std::size_t kColBlock = 256;
  std::fill(out, out + rows * cols, 0.0f);
  for (std::size_t c0 = 0; c0 < cols; c0 += kColBlock) {
    const std::size_t c1 = std::min(cols, c0 + kColBlock);
    for (std::size_t r0 = 0; r0 < rows; r0 += kRowBlock) {
      const std::size_t r1 = std::min(rows, r0 + kRowBlock);
      for (std::size_t k = 0; k < in; ++k) {
        const float* wrow = wd + k * cols;
        for (std::size_t r = r0; r < r1; ++r) {
          const float xv = x[r * in + k];
          float* orow = out + r * cols;
          for (std::size_t c = c0; c < c1; ++c) orow[c] += xv * wrow[c];
        }
      }
    }
  }
  if (bias != nullptr) {
    for (std::size_t r = 0; r < rows; ++r) {
      float* orow = out + r * cols;
      for (std::size_t c = 0; c < cols; ++c) orow[c] += bias[c];
    }
  }
}

inline void linear(const float* x, std::size_t rows, const Tensor& w,
                   const float* bias, float* out) {
  linear(x, rows, w.data(), w.dim(0), w.dim(1), bias, out);
}

}  // namespace stereoprobe
