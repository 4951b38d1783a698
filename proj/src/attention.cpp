#include "seqscript/attention.hpp"

namespace seqscript {

SpatialAttention make_spatial_attention(AttentionGate gate) {
  SpatialAttention att;
  att.conv = make_conv3x3(1, 1);  // zero init: gate starts flat at sigmoid(0) = 0.5
  att.gate = gate;
  return att;
}

Tensor channel_mean(const Tensor& input) {
  if (input.rank() != 3)
    throw ShapeError("channel_mean: input must be [H,W,C], got " + shape_str(input.shape));
  const int H = input.shape[0], W = input.shape[1], C = input.shape[2];
  Tensor s({H, W}, 0.0);
  const double* in = input.data.data();
  for (int i = 0; i < H * W; ++i) {
    const double* row = in + static_cast<std::size_t>(i) * C;
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += row[c];
    s.data[static_cast<std::size_t>(i)] = acc / C;
  }
  return s;
}

Tensor attention_map(const SpatialAttention& att, const Tensor& s) {
  if (s.rank() != 2) throw ShapeError("attention_map: descriptor must be [H,W]");
  const Tensor s3 = s.reshaped({s.shape[0], s.shape[1], 1});
  Tensor pre = conv2d_forward(att.conv, s3);
  Tensor gated = att.gate == AttentionGate::relu_sigmoid ? sigmoid(relu(pre)) : sigmoid(pre);
  return gated.reshaped({s.shape[0], s.shape[1]});
}

Tensor attention_apply(const Tensor& input, const Tensor& t) {
  return ewise(input, t, EwiseKind::mul);
}

Tensor attention_forward(const SpatialAttention& att, const Tensor& input, AttentionCache* cache) {
  const Tensor s = channel_mean(input);
  const Tensor s3 = s.reshaped({s.shape[0], s.shape[1], 1});
  Tensor pre = conv2d_forward(att.conv, s3);
  Tensor act = att.gate == AttentionGate::relu_sigmoid ? sigmoid(relu(pre)) : sigmoid(pre);
  Tensor t = act.reshaped({s.shape[0], s.shape[1]});
  Tensor out = attention_apply(input, t);
  if (cache) {
    cache->input = input;
    cache->s3 = std::move(s3);
    cache->preact = std::move(pre);
    cache->t = std::move(t);
  }
  return out;
}

AttentionGrads attention_backward(const SpatialAttention& att, const AttentionCache& cache,
                                  const Tensor& grad_out) {
  if (cache.input.data.empty()) throw InternalError("attention_backward: missing forward cache");
  if (!grad_out.same_shape(cache.input))
    throw ShapeError("attention_backward: grad_out shape mismatch");
  const int H = cache.input.shape[0], W = cache.input.shape[1], C = cache.input.shape[2];

  // Multiply path: dF += dO * t; gate path: dt = sum_c dO * F.
  AttentionGrads g;
  g.input = ewise(grad_out, cache.t, EwiseKind::mul);
  Tensor dt({H, W}, 0.0);
  for (int i = 0; i < H * W; ++i) {
    const double* grow = grad_out.data.data() + static_cast<std::size_t>(i) * C;
    const double* frow = cache.input.data.data() + static_cast<std::size_t>(i) * C;
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += grow[c] * frow[c];
    dt.data[static_cast<std::size_t>(i)] = acc;
  }

  // Through sigmoid, then relu (derivative 0 at exactly 0).
  Tensor dpre({H, W, 1}, 0.0);
  for (int i = 0; i < H * W; ++i) {
    const double tv = cache.t.data[static_cast<std::size_t>(i)];
    double d = dt.data[static_cast<std::size_t>(i)] * tv * (1.0 - tv);
    if (att.gate == AttentionGate::relu_sigmoid && cache.preact.data[static_cast<std::size_t>(i)] <= 0.0)
      d = 0.0;
    dpre.data[static_cast<std::size_t>(i)] = d;
  }

  ConvGrads cg = conv2d_backward(att.conv, cache.s3, dpre);
  g.conv_weights = std::move(cg.weights);
  g.conv_bias = std::move(cg.bias);

  // Descriptor path back into the input: ds spreads 1/C to every channel.
  const double inv_c = 1.0 / C;
  for (int i = 0; i < H * W; ++i) {
    const double ds = cg.input.data[static_cast<std::size_t>(i)] * inv_c;
    double* girow = g.input.data.data() + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) girow[c] += ds;
  }
  return g;
}

}  // namespace seqscript
