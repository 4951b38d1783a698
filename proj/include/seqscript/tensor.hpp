#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "seqscript/error.hpp"

namespace seqscript {

// Dense row-major tensor of doubles. Feature maps are [H,W,C] (channel
// fastest), batches [N,H,W,C]. No views or strides: every tensor owns its
// storage.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> shape_, double fill = 0.0);

  int rank() const { return static_cast<int>(shape.size()); }
  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double& operator()(int i, int j, int k, int l) {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  double operator()(int i, int j, int k, int l) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  // Reinterprets the flat data under a new shape of equal total size.
  Tensor reshaped(std::vector<int> new_shape) const;
};

Tensor tensor_new(const std::vector<int>& shape, double fill);

enum class EwiseKind { add, sub, mul };

// Elementwise op. Shapes must match, except that b may be [H,W] against an
// [H,W,C] a, in which case b is replicated across the channel axis.
Tensor ewise(const Tensor& a, const Tensor& b, EwiseKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Standard [m,k] x [k,n] product.
Tensor matmul(const Tensor& a, const Tensor& b);

std::string shape_str(const std::vector<int>& shape);
void check_finite(const Tensor& t, const std::string& what);

// Deterministic splittable generator (splitmix64 core). The same seed gives
// the same stream on every platform; split() derives an independent stream
// from a stream id, so per-crop/per-layer streams never depend on ordering.
struct Rng {
  std::uint64_t state;
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal, Box-Muller
  int uniform_int(int lo, int hi);       // inclusive bounds
  Rng split(std::uint64_t stream) const;

 private:
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Tensor rng_normal(Rng& rng, const std::vector<int>& shape, double stddev);

}  // namespace seqscript
