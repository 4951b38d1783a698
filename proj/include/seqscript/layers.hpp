#pragma once
#include <vector>

#include "seqscript/tensor.hpp"

namespace seqscript {

enum class Mode { train, eval };

// Same-size 2-D convolution (cross-correlation, no kernel flip). Weights are
// [kh,kw,c_in,c_out] so the output-channel axis is contiguous; stride is
// always 1. The ladder convs are 3x3/pad 1, skip projections 1x1/pad 0.
struct ConvLayer {
  Tensor weights;  // [kh, kw, c_in, c_out]
  Tensor bias;     // [c_out]
  int pad = 1;

  int kh() const { return weights.shape[0]; }
  int kw() const { return weights.shape[1]; }
  int c_in() const { return weights.shape[2]; }
  int c_out() const { return weights.shape[3]; }
};

ConvLayer make_conv3x3(int c_in, int c_out);
ConvLayer make_conv1x1(int c_in, int c_out);

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& input);

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

// Gradients of conv2d_forward under the loss sum(grad_out * output).
ConvGrads conv2d_backward(const ConvLayer& layer, const Tensor& input, const Tensor& grad_out);
// Variant without the (often unneeded) input gradient.
void conv2d_backward_params(const ConvLayer& layer, const Tensor& input, const Tensor& grad_out,
                            Tensor& grad_weights, Tensor& grad_bias);
Tensor conv2d_backward_input(const ConvLayer& layer, const std::vector<int>& input_shape,
                             const Tensor& grad_out);

struct MaxPoolSpec {
  int pool_h = 2, pool_w = 2;
  int stride_h = 2, stride_w = 2;
};

struct MaxPoolResult {
  Tensor output;            // [oh, ow, c]
  std::vector<int> argmax;  // flat input index per output element
  std::vector<int> input_shape;
};

// Per-window per-channel max with floor semantics; ties go to the first
// element in row-major order.
MaxPoolResult maxpool_forward(const MaxPoolSpec& spec, const Tensor& input);
Tensor maxpool_backward(const MaxPoolResult& fwd, const Tensor& grad_out);

struct BatchNormLayer {
  Tensor gamma, beta;               // [c]
  Tensor running_mean, running_var; // [c]
  double momentum = 0.9;
  double epsilon = 1e-5;

  int channels() const { return gamma.shape[0]; }
};

BatchNormLayer make_batchnorm(int channels);

struct BatchNormCache {
  Tensor xhat;                  // normalized input, same shape as batch
  std::vector<double> inv_std;  // per channel
};

// Train mode normalizes with batch statistics over N*H*W per channel and
// updates the running stats; eval mode uses the running stats. Batch is
// [N,H,W,C].
Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& batch, Mode mode,
                         BatchNormCache* cache = nullptr);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

BatchNormGrads batchnorm_backward(const BatchNormLayer& layer, const BatchNormCache& cache,
                                  const Tensor& grad_out);

Tensor relu(const Tensor& x);
// relu'(0) is taken as 0.
Tensor relu_backward(const Tensor& preact, const Tensor& grad_out);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& act, const Tensor& grad_out);
// Softmax over the last axis, computed with max subtraction.
Tensor softmax(const Tensor& x);
Tensor softmax_backward(const Tensor& softmax_out, const Tensor& grad_out);

struct FcLayer {
  Tensor weights;  // [d_in, d_out]
  Tensor bias;     // [d_out]
};

FcLayer make_fc(int d_in, int d_out);

// input is [d_in] or [T, d_in]; rows map independently through x*W + b.
Tensor fc_forward(const FcLayer& layer, const Tensor& input);

struct FcGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

FcGrads fc_backward(const FcLayer& layer, const Tensor& input, const Tensor& grad_out);

}  // namespace seqscript
