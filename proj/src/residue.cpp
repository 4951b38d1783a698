#include "seqscript/residue.hpp"

namespace seqscript {

ResidueBlock make_residue_block(int c_in, int c_mid, int c_out, bool use_skip) {
  ResidueBlock b;
  b.conv_a = make_conv3x3(c_in, c_mid);
  b.conv_b = make_conv3x3(c_mid, c_out);
  b.use_skip = use_skip;
  if (use_skip && c_in != c_out) b.skip_proj = make_conv1x1(c_in, c_out);
  return b;
}

Tensor resblock_forward(const ResidueBlock& block, const Tensor& input, ResBlockCache* cache) {
  Tensor a1 = conv2d_forward(block.conv_a, input);
  Tensor h1 = relu(a1);
  Tensor a2 = conv2d_forward(block.conv_b, h1);
  Tensor out = relu(a2);
  if (block.use_skip) {
    if (block.skip_proj)
      out = add(out, conv2d_forward(*block.skip_proj, input));
    else
      out = add(out, input);
  }
  if (cache) {
    cache->input = input;
    cache->a1 = std::move(a1);
    cache->h1 = std::move(h1);
    cache->a2 = std::move(a2);
  }
  return out;
}

ResBlockGrads resblock_backward(const ResidueBlock& block, const ResBlockCache& cache,
                                const Tensor& grad_out) {
  if (cache.input.data.empty()) throw InternalError("resblock_backward: missing forward cache");
  ResBlockGrads g;
  Tensor da2 = relu_backward(cache.a2, grad_out);
  ConvGrads gb = conv2d_backward(block.conv_b, cache.h1, da2);
  g.conv_b_weights = std::move(gb.weights);
  g.conv_b_bias = std::move(gb.bias);
  Tensor da1 = relu_backward(cache.a1, gb.input);
  ConvGrads ga = conv2d_backward(block.conv_a, cache.input, da1);
  g.conv_a_weights = std::move(ga.weights);
  g.conv_a_bias = std::move(ga.bias);
  g.input = std::move(ga.input);
  if (block.use_skip) {
    if (block.skip_proj) {
      ConvGrads gs = conv2d_backward(*block.skip_proj, cache.input, grad_out);
      g.skip_weights = std::move(gs.weights);
      g.skip_bias = std::move(gs.bias);
      g.input = add(g.input, gs.input);
    } else {
      g.input = add(g.input, grad_out);
    }
  }
  return g;
}

}  // namespace seqscript
