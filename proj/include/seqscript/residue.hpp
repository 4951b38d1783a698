#pragma once
#include <optional>

#include "seqscript/layers.hpp"

namespace seqscript {

// Two 3x3 conv+relu layers plus a skip connection from the block input to
// the second conv's activation. When the channel counts differ the skip is
// a learned 1x1 projection; otherwise it is the identity. use_skip=false
// degrades the block to a plain conv-relu-conv-relu chain.
struct ResidueBlock {
  ConvLayer conv_a;
  ConvLayer conv_b;
  std::optional<ConvLayer> skip_proj;
  bool use_skip = true;

  int c_in() const { return conv_a.c_in(); }
  int c_out() const { return conv_b.c_out(); }
};

ResidueBlock make_residue_block(int c_in, int c_mid, int c_out, bool use_skip = true);

struct ResBlockCache {
  Tensor input;
  Tensor a1;  // conv_a preact
  Tensor h1;  // relu(a1)
  Tensor a2;  // conv_b preact
};

Tensor resblock_forward(const ResidueBlock& block, const Tensor& input,
                        ResBlockCache* cache = nullptr);

struct ResBlockGrads {
  Tensor input;
  Tensor conv_a_weights, conv_a_bias;
  Tensor conv_b_weights, conv_b_bias;
  Tensor skip_weights, skip_bias;  // empty when the skip is identity/absent
};

ResBlockGrads resblock_backward(const ResidueBlock& block, const ResBlockCache& cache,
                                const Tensor& grad_out);

}  // namespace seqscript
