#pragma once
#include "seqscript/layers.hpp"

namespace seqscript {

// Gate nonlinearity. The reweighting map is sigmoid(relu(conv(s))) by
// default, which confines gates to [0.5, 1); sigmoid_only drops the inner
// relu for comparison runs.
enum class AttentionGate { relu_sigmoid, sigmoid_only };

// Spatial attention: collapse channels to a per-position descriptor, learn
// per-position weights with a single 3x3 conv, and rescale every channel of
// the input by the resulting gate.
struct SpatialAttention {
  ConvLayer conv;  // 1 -> 1 channels, 3x3, pad 1
  AttentionGate gate = AttentionGate::relu_sigmoid;
};

SpatialAttention make_spatial_attention(AttentionGate gate = AttentionGate::relu_sigmoid);

// Per-position channel mean: [H,W,C] -> [H,W].
Tensor channel_mean(const Tensor& input);

// Gate map from a spatial descriptor: [H,W] -> [H,W], entries in (0,1).
Tensor attention_map(const SpatialAttention& att, const Tensor& s);

// Scales all channels at (h,w) by t(h,w).
Tensor attention_apply(const Tensor& input, const Tensor& t);

struct AttentionCache {
  Tensor input;   // [H,W,C]
  Tensor s3;      // descriptor as [H,W,1] (conv input)
  Tensor preact;  // conv output [H,W,1]
  Tensor t;       // gate map [H,W]
};

Tensor attention_forward(const SpatialAttention& att, const Tensor& input,
                         AttentionCache* cache = nullptr);

struct AttentionGrads {
  Tensor input;
  Tensor conv_weights;
  Tensor conv_bias;
};

// Exact gradient of the composite descriptor -> gate -> rescale block,
// covering both the multiply path and the descriptor path into the input.
AttentionGrads attention_backward(const SpatialAttention& att, const AttentionCache& cache,
                                  const Tensor& grad_out);

}  // namespace seqscript
