#pragma once
// Test-only oracles and the finite-difference gradient checker. Everything
// here is deliberately written as plain loops, independent of the library's
// optimized code paths.
#include <cmath>
#include <functional>
#include <vector>

#include "seqscript/tensor.hpp"

namespace testsup {

using seqscript::Tensor;

// Naive triple-loop matrix product.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n}, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  return out;
}

// Naive six-loop padded cross-correlation.
inline Tensor conv_oracle(const Tensor& input, const Tensor& weights, const Tensor& bias, int pad) {
  const int H = input.shape[0], W = input.shape[1], Ci = input.shape[2];
  const int kh = weights.shape[0], kw = weights.shape[1], Co = weights.shape[3];
  Tensor out({H, W, Co}, 0.0);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int o = 0; o < Co; ++o) {
        double acc = bias(o);
        for (int u = 0; u < kh; ++u)
          for (int v = 0; v < kw; ++v)
            for (int c = 0; c < Ci; ++c) {
              const int ih = h + u - pad, iw = w + v - pad;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += input(ih, iw, c) * weights(u, v, c, o);
            }
        out(h, w, o) = acc;
      }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
    m = std::max(m, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return m;
}

inline Tensor random_tensor(seqscript::Rng& rng, const std::vector<int>& shape, double scale = 1.0) {
  Tensor t(shape, 0.0);
  for (double& v : t.data) v = rng.uniform(-scale, scale);
  return t;
}

// Central finite differences on every element of `x` against the analytic
// gradient, under the scalar loss computed by `loss`. Relative error uses
// the largest magnitude in either gradient as the scale so that near-zero
// gradients do not blow the ratio up.
inline double gradcheck(Tensor& x, const Tensor& analytic, const std::function<double()>& loss,
                        double h = 1e-5) {
  double scale = 1e-4;
  Tensor numeric(x.shape, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data[i];
    x.data[i] = keep + h;
    const double up = loss();
    x.data[i] = keep - h;
    const double dn = loss();
    x.data[i] = keep;
    numeric.data[i] = (up - dn) / (2.0 * h);
    scale = std::max({scale, std::abs(numeric.data[i]), std::abs(analytic.data[i])});
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(numeric.data[i] - analytic.data[i]) / scale);
  return worst;
}

// sum(grad_out * f(...)) — the scalar loss used by the backward contracts.
inline double weighted_sum(const Tensor& out, const Tensor& weights) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += out.data[i] * weights.data[i];
  return acc;
}

}  // namespace testsup
