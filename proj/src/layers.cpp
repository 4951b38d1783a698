#include "seqscript/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace seqscript {

ConvLayer make_conv3x3(int c_in, int c_out) {
  ConvLayer l;
  l.weights = Tensor({3, 3, c_in, c_out}, 0.0);
  l.bias = Tensor({c_out}, 0.0);
  l.pad = 1;
  return l;
}

ConvLayer make_conv1x1(int c_in, int c_out) {
  ConvLayer l;
  l.weights = Tensor({1, 1, c_in, c_out}, 0.0);
  l.bias = Tensor({c_out}, 0.0);
  l.pad = 0;
  return l;
}

static void check_conv_input(const ConvLayer& layer, const Tensor& input) {
  if (input.rank() != 3)
    throw ShapeError("conv2d: input must be [H,W,C], got " + shape_str(input.shape));
  if (input.shape[2] != layer.c_in())
    throw ShapeError("conv2d: input has " + std::to_string(input.shape[2]) +
                     " channels, layer expects " + std::to_string(layer.c_in()));
}

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& input) {
  check_conv_input(layer, input);
  const int H = input.shape[0], W = input.shape[1];
  const int ci = layer.c_in(), co = layer.c_out();
  const int kh = layer.kh(), kw = layer.kw(), pad = layer.pad;
  Tensor out({H, W, co}, 0.0);
  const double* in = input.data.data();
  const double* wt = layer.weights.data.data();
  const double* bias = layer.bias.data.data();
  double* op = out.data.data();
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      double* orow = op + (static_cast<std::size_t>(h) * W + w) * co;
      std::memcpy(orow, bias, sizeof(double) * co);
      for (int u = 0; u < kh; ++u) {
        const int ih = h + u - pad;
        if (ih < 0 || ih >= H) continue;
        for (int v = 0; v < kw; ++v) {
          const int iw = w + v - pad;
          if (iw < 0 || iw >= W) continue;
          const double* irow = in + (static_cast<std::size_t>(ih) * W + iw) * ci;
          const double* wrow = wt + (static_cast<std::size_t>(u) * kw + v) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const double a = irow[c];
            const double* wr = wrow + static_cast<std::size_t>(c) * co;
            for (int o = 0; o < co; ++o) orow[o] += a * wr[o];
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward_params(const ConvLayer& layer, const Tensor& input, const Tensor& grad_out,
                            Tensor& grad_weights, Tensor& grad_bias) {
  check_conv_input(layer, input);
  const int H = input.shape[0], W = input.shape[1];
  if (grad_out.shape != std::vector<int>{H, W, layer.c_out()})
    throw ShapeError("conv2d_backward: grad_out shape " + shape_str(grad_out.shape) +
                     " does not match forward output");
  const int ci = layer.c_in(), co = layer.c_out();
  const int kh = layer.kh(), kw = layer.kw(), pad = layer.pad;
  if (grad_weights.shape != layer.weights.shape) grad_weights = Tensor(layer.weights.shape, 0.0);
  if (grad_bias.shape != layer.bias.shape) grad_bias = Tensor(layer.bias.shape, 0.0);
  const double* in = input.data.data();
  const double* go = grad_out.data.data();
  double* gw = grad_weights.data.data();
  double* gb = grad_bias.data.data();
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const double* grow = go + (static_cast<std::size_t>(h) * W + w) * co;
      for (int o = 0; o < co; ++o) gb[o] += grow[o];
      for (int u = 0; u < kh; ++u) {
        const int ih = h + u - pad;
        if (ih < 0 || ih >= H) continue;
        for (int v = 0; v < kw; ++v) {
          const int iw = w + v - pad;
          if (iw < 0 || iw >= W) continue;
          const double* irow = in + (static_cast<std::size_t>(ih) * W + iw) * ci;
          double* gwrow = gw + (static_cast<std::size_t>(u) * kw + v) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const double a = irow[c];
            double* gwr = gwrow + static_cast<std::size_t>(c) * co;
            for (int o = 0; o < co; ++o) gwr[o] += a * grow[o];
          }
        }
      }
    }
  }
}

Tensor conv2d_backward_input(const ConvLayer& layer, const std::vector<int>& input_shape,
                             const Tensor& grad_out) {
  const int H = input_shape[0], W = input_shape[1];
  const int ci = layer.c_in(), co = layer.c_out();
  const int kh = layer.kh(), kw = layer.kw(), pad = layer.pad;
  Tensor grad_in(input_shape, 0.0);
  const double* go = grad_out.data.data();
  const double* wt = layer.weights.data.data();
  double* gi = grad_in.data.data();
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const double* grow = go + (static_cast<std::size_t>(h) * W + w) * co;
      for (int u = 0; u < kh; ++u) {
        const int ih = h + u - pad;
        if (ih < 0 || ih >= H) continue;
        for (int v = 0; v < kw; ++v) {
          const int iw = w + v - pad;
          if (iw < 0 || iw >= W) continue;
          double* girow = gi + (static_cast<std::size_t>(ih) * W + iw) * ci;
          const double* wrow = wt + (static_cast<std::size_t>(u) * kw + v) * ci * co;
          for (int c = 0; c < ci; ++c) {
            const double* wr = wrow + static_cast<std::size_t>(c) * co;
            double acc = 0.0;
            for (int o = 0; o < co; ++o) acc += grow[o] * wr[o];
            girow[c] += acc;
          }
        }
      }
    }
  }
  return grad_in;
}

ConvGrads conv2d_backward(const ConvLayer& layer, const Tensor& input, const Tensor& grad_out) {
  ConvGrads g;
  conv2d_backward_params(layer, input, grad_out, g.weights, g.bias);
  g.input = conv2d_backward_input(layer, input.shape, grad_out);
  return g;
}

MaxPoolResult maxpool_forward(const MaxPoolSpec& spec, const Tensor& input) {
  if (input.rank() != 3)
    throw ShapeError("maxpool: input must be [H,W,C], got " + shape_str(input.shape));
  const int H = input.shape[0], W = input.shape[1], C = input.shape[2];
  if (spec.pool_h > H || spec.pool_w > W)
    throw ShapeError("maxpool: window " + std::to_string(spec.pool_h) + "x" +
                     std::to_string(spec.pool_w) + " larger than input " + shape_str(input.shape));
  const int oh = (H - spec.pool_h) / spec.stride_h + 1;
  const int ow = (W - spec.pool_w) / spec.stride_w + 1;
  MaxPoolResult res;
  res.output = Tensor({oh, ow, C}, 0.0);
  res.argmax.assign(static_cast<std::size_t>(oh) * ow * C, -1);
  res.input_shape = input.shape;
  const double* in = input.data.data();
  double* op = res.output.data.data();
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const int h0 = y * spec.stride_h, w0 = x * spec.stride_w;
      double* orow = op + (static_cast<std::size_t>(y) * ow + x) * C;
      int* arow = res.argmax.data() + (static_cast<std::size_t>(y) * ow + x) * C;
      for (int u = 0; u < spec.pool_h; ++u) {
        for (int v = 0; v < spec.pool_w; ++v) {
          const std::size_t base = (static_cast<std::size_t>(h0 + u) * W + (w0 + v)) * C;
          const double* irow = in + base;
          if (u == 0 && v == 0) {
            for (int c = 0; c < C; ++c) {
              orow[c] = irow[c];
              arow[c] = static_cast<int>(base) + c;
            }
          } else {
            for (int c = 0; c < C; ++c) {
              if (irow[c] > orow[c]) {
                orow[c] = irow[c];
                arow[c] = static_cast<int>(base) + c;
              }
            }
          }
        }
      }
    }
  }
  return res;
}

Tensor maxpool_backward(const MaxPoolResult& fwd, const Tensor& grad_out) {
  if (grad_out.size() != fwd.argmax.size())
    throw ShapeError("maxpool_backward: grad_out shape " + shape_str(grad_out.shape) +
                     " does not match the pooled output element count");
  Tensor grad_in(fwd.input_shape, 0.0);
  const std::size_t n_in = grad_in.size();
  for (std::size_t i = 0; i < fwd.argmax.size(); ++i) {
    const int idx = fwd.argmax[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= n_in)
      throw InternalError("maxpool_backward: argmax index out of range");
    grad_in.data[static_cast<std::size_t>(idx)] += grad_out.data[i];
  }
  return grad_in;
}

BatchNormLayer make_batchnorm(int channels) {
  BatchNormLayer l;
  l.gamma = Tensor({channels}, 1.0);
  l.beta = Tensor({channels}, 0.0);
  l.running_mean = Tensor({channels}, 0.0);
  l.running_var = Tensor({channels}, 1.0);
  return l;
}

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& batch, Mode mode,
                         BatchNormCache* cache) {
  if (batch.rank() != 4)
    throw ShapeError("batchnorm: batch must be [N,H,W,C], got " + shape_str(batch.shape));
  const int C = batch.shape[3];
  if (C != layer.channels())
    throw ShapeError("batchnorm: batch has " + std::to_string(C) + " channels, layer expects " +
                     std::to_string(layer.channels()));
  const std::size_t rows = batch.size() / static_cast<std::size_t>(C);
  Tensor out;
  out.shape = batch.shape;
  out.data.resize(batch.size());
  const double* in = batch.data.data();
  double* op = out.data.data();
  const double* gamma = layer.gamma.data.data();
  const double* beta = layer.beta.data.data();

  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C, 0.0);
  if (mode == Mode::train) {
    if (rows < 2) throw ShapeError("batchnorm: train mode needs N*H*W >= 2");
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = in + r * C;
      for (int c = 0; c < C; ++c) mean[c] += row[c];
    }
    for (int c = 0; c < C; ++c) mean[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = in + r * C;
      for (int c = 0; c < C; ++c) {
        const double d = row[c] - mean[c];
        var[c] += d * d;
      }
    }
    for (int c = 0; c < C; ++c) var[c] /= static_cast<double>(rows);
    for (int c = 0; c < C; ++c) {
      layer.running_mean(c) = layer.momentum * layer.running_mean(c) + (1.0 - layer.momentum) * mean[c];
      layer.running_var(c) = layer.momentum * layer.running_var(c) + (1.0 - layer.momentum) * var[c];
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = layer.running_mean(c);
      var[c] = layer.running_var(c);
    }
  }
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + layer.epsilon);

  if (cache) {
    cache->xhat.shape = batch.shape;
    cache->xhat.data.resize(batch.size());
    cache->inv_std = inv_std;
  }
  double* xh = cache ? cache->xhat.data.data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * C;
    double* orow = op + r * C;
    for (int c = 0; c < C; ++c) {
      const double xhat = (row[c] - mean[c]) * inv_std[c];
      if (xh) xh[r * C + c] = xhat;
      orow[c] = gamma[c] * xhat + beta[c];
    }
  }
  return out;
}

BatchNormGrads batchnorm_backward(const BatchNormLayer& layer, const BatchNormCache& cache,
                                  const Tensor& grad_out) {
  if (cache.xhat.data.empty())
    throw InternalError("batchnorm_backward: missing forward cache");
  if (grad_out.shape != cache.xhat.shape)
    throw ShapeError("batchnorm_backward: grad_out shape mismatch");
  const int C = grad_out.shape[3];
  const std::size_t rows = grad_out.size() / static_cast<std::size_t>(C);
  const double n = static_cast<double>(rows);

  BatchNormGrads g;
  g.gamma = Tensor({C}, 0.0);
  g.beta = Tensor({C}, 0.0);
  g.input.shape = grad_out.shape;
  g.input.data.resize(grad_out.size());

  const double* go = grad_out.data.data();
  const double* xh = cache.xhat.data.data();
  // Accumulate sum(dy) and sum(dy * xhat) per channel.
  for (std::size_t r = 0; r < rows; ++r) {
    const double* grow = go + r * C;
    const double* xrow = xh + r * C;
    for (int c = 0; c < C; ++c) {
      g.beta(c) += grow[c];
      g.gamma(c) += grow[c] * xrow[c];
    }
  }
  // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy*xhat))
  double* gi = g.input.data.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* grow = go + r * C;
    const double* xrow = xh + r * C;
    double* girow = gi + r * C;
    for (int c = 0; c < C; ++c) {
      const double term = grow[c] - g.beta(c) / n - xrow[c] * g.gamma(c) / n;
      girow[c] = layer.gamma(c) * cache.inv_std[c] * term;
    }
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out;
  out.shape = x.shape;
  out.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& preact, const Tensor& grad_out) {
  if (!preact.same_shape(grad_out)) throw ShapeError("relu_backward: shape mismatch");
  Tensor out;
  out.shape = grad_out.shape;
  out.data.resize(grad_out.size());
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    out.data[i] = preact.data[i] > 0.0 ? grad_out.data[i] : 0.0;
  return out;
}

static inline double sigmoid1(double v) {
  // Stable in both tails.
  if (v >= 0.0) {
    const double z = std::exp(-v);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(v);
  return z / (1.0 + z);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out;
  out.shape = x.shape;
  out.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = sigmoid1(x.data[i]);
  return out;
}

Tensor sigmoid_backward(const Tensor& act, const Tensor& grad_out) {
  if (!act.same_shape(grad_out)) throw ShapeError("sigmoid_backward: shape mismatch");
  Tensor out;
  out.shape = grad_out.shape;
  out.data.resize(grad_out.size());
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const double s = act.data[i];
    out.data[i] = grad_out.data[i] * s * (1.0 - s);
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  const int cols = x.shape.back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(cols);
  Tensor out;
  out.shape = x.shape;
  out.data.resize(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data.data() + r * cols;
    double* orow = out.data.data() + r * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (int c = 0; c < cols; ++c) orow[c] /= sum;
  }
  return out;
}

Tensor softmax_backward(const Tensor& softmax_out, const Tensor& grad_out) {
  if (!softmax_out.same_shape(grad_out)) throw ShapeError("softmax_backward: shape mismatch");
  const int cols = softmax_out.shape.back();
  const std::size_t rows = softmax_out.size() / static_cast<std::size_t>(cols);
  Tensor out;
  out.shape = grad_out.shape;
  out.data.resize(grad_out.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = softmax_out.data.data() + r * cols;
    const double* g = grad_out.data.data() + r * cols;
    double* o = out.data.data() + r * cols;
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += s[c] * g[c];
    for (int c = 0; c < cols; ++c) o[c] = s[c] * (g[c] - dot);
  }
  return out;
}

FcLayer make_fc(int d_in, int d_out) {
  FcLayer l;
  l.weights = Tensor({d_in, d_out}, 0.0);
  l.bias = Tensor({d_out}, 0.0);
  return l;
}

Tensor fc_forward(const FcLayer& layer, const Tensor& input) {
  const int d_in = layer.weights.shape[0], d_out = layer.weights.shape[1];
  const bool vec = input.rank() == 1;
  if ((vec && input.shape[0] != d_in) || (!vec && (input.rank() != 2 || input.shape[1] != d_in)))
    throw ShapeError("fc_forward: input " + shape_str(input.shape) + " incompatible with weights " +
                     shape_str(layer.weights.shape));
  const Tensor in2 = vec ? input.reshaped({1, d_in}) : input;
  Tensor out = matmul(in2, layer.weights);
  for (int r = 0; r < out.shape[0]; ++r)
    for (int c = 0; c < d_out; ++c) out(r, c) += layer.bias(c);
  return vec ? out.reshaped({d_out}) : out;
}

FcGrads fc_backward(const FcLayer& layer, const Tensor& input, const Tensor& grad_out) {
  const int d_in = layer.weights.shape[0], d_out = layer.weights.shape[1];
  const bool vec = input.rank() == 1;
  const Tensor in2 = vec ? input.reshaped({1, d_in}) : input;
  const Tensor go2 = vec ? grad_out.reshaped({1, d_out}) : grad_out;
  if (go2.rank() != 2 || go2.shape[0] != in2.shape[0] || go2.shape[1] != d_out)
    throw ShapeError("fc_backward: grad_out shape mismatch");
  const int T = in2.shape[0];
  FcGrads g;
  g.weights = Tensor({d_in, d_out}, 0.0);
  g.bias = Tensor({d_out}, 0.0);
  // dW = x^T * dy, db = column sums of dy, dx = dy * W^T
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < d_in; ++i) {
      const double xv = in2(t, i);
      for (int o = 0; o < d_out; ++o) g.weights(i, o) += xv * go2(t, o);
    }
  for (int t = 0; t < T; ++t)
    for (int o = 0; o < d_out; ++o) g.bias(o) += go2(t, o);
  Tensor gx({T, d_in}, 0.0);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < d_in; ++i) {
      double acc = 0.0;
      for (int o = 0; o < d_out; ++o) acc += go2(t, o) * layer.weights(i, o);
      gx(t, i) = acc;
    }
  g.input = vec ? gx.reshaped({d_in}) : std::move(gx);
  return g;
}

}  // namespace seqscript
