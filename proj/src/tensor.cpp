#include "seqscript/tensor.hpp"

#include <cmath>
#include <sstream>

namespace seqscript {

namespace {

std::size_t checked_size(const std::vector<int>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dimension must be >= 1, got " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape_, double fill)
    : shape(std::move(shape_)), data(checked_size(shape), fill) {}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
  if (checked_size(new_shape) != size())
    throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor out;
  out.shape = std::move(new_shape);
  out.data = data;
  return out;
}

Tensor tensor_new(const std::vector<int>& shape, double fill) { return Tensor(shape, fill); }

Tensor ewise(const Tensor& a, const Tensor& b, EwiseKind kind) {
  Tensor out;
  out.shape = a.shape;
  out.data.resize(a.size());
  if (a.shape == b.shape) {
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    const std::size_t n = a.size();
    switch (kind) {
      case EwiseKind::add:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case EwiseKind::sub:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case EwiseKind::mul:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
    }
    return out;
  }
  // Broadcast: b is [H,W], a is [H,W,C]; b replicated over channels.
  if (a.rank() == 3 && b.rank() == 2 && a.shape[0] == b.shape[0] && a.shape[1] == b.shape[1]) {
    const int hw = a.shape[0] * a.shape[1];
    const int c = a.shape[2];
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (int i = 0; i < hw; ++i) {
      const double bv = pb[i];
      const double* row = pa + static_cast<std::size_t>(i) * c;
      double* orow = po + static_cast<std::size_t>(i) * c;
      switch (kind) {
        case EwiseKind::add:
          for (int k = 0; k < c; ++k) orow[k] = row[k] + bv;
          break;
        case EwiseKind::sub:
          for (int k = 0; k < c; ++k) orow[k] = row[k] - bv;
          break;
        case EwiseKind::mul:
          for (int k = 0; k < c; ++k) orow[k] = row[k] * bv;
          break;
      }
    }
    return out;
  }
  throw ShapeError("ewise shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) { return ewise(a, b, EwiseKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return ewise(a, b, EwiseKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return ewise(a, b, EwiseKind::mul); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n}, 0.0);
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* po = out.data.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<std::size_t>(i) * k;
    double* orow = po + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
}

namespace {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state(seed) {
  // Burn one round so seeds 0 and 1 do not share a prefix.
  splitmix64(state);
}

std::uint64_t Rng::next_u64() { return splitmix64(state); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw InternalError("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

Rng Rng::split(std::uint64_t stream) const {
  std::uint64_t s = state ^ (0x9e3779b97f4a7c15ULL + stream * 0xd1342543de82ef95ULL);
  return Rng(s);
}

Tensor rng_normal(Rng& rng, const std::vector<int>& shape, double stddev) {
  if (!(stddev > 0.0)) throw ShapeError("rng_normal: stddev must be > 0");
  Tensor out(shape, 0.0);
  for (double& v : out.data) v = rng.normal() * stddev;
  return out;
}

}  // namespace seqscript
