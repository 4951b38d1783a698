#pragma once
#include <vector>

#include "seqscript/tensor.hpp"

namespace seqscript {

// LSTM cell with a recurrent projection: the hidden state is projected to a
// lower dimension at every step, and the projected state (not the full
// hidden state) feeds the next step's gates. Gate blocks are stacked in
// (input, forget, cell-candidate, output) order in W_x, W_r, b; checkpoint
// files rely on that order.
struct LstmpCell {
  Tensor W_x;  // [4*hidden, d_in]
  Tensor W_r;  // [4*hidden, proj]
  Tensor b;    // [4*hidden]
  Tensor P;    // [proj, hidden]

  int hidden() const { return P.shape[1]; }
  int proj() const { return P.shape[0]; }
  int d_in() const { return W_x.shape[1]; }
};

LstmpCell make_lstmp_cell(int d_in, int hidden, int proj);

struct LstmStep {
  Tensor r;  // [proj]
  Tensor c;  // [hidden]
};

LstmStep lstmp_step(const LstmpCell& cell, const Tensor& x, const Tensor& r_prev,
                    const Tensor& c_prev);

struct BiLstm {
  LstmpCell fwd;
  LstmpCell bwd;

  int out_dim() const { return fwd.proj() + bwd.proj(); }
};

BiLstm make_bilstm(int d_in, int hidden, int proj);

// Per-direction step-by-step state kept for backpropagation through time.
struct LstmDirCache {
  // Each entry is [T, dim] flattened; index t*dim + j.
  std::vector<double> i, f, g, o, c, tanh_c, h, r;
  int T = 0;
};

struct BiLstmCache {
  Tensor frames;  // [T, d_in]
  LstmDirCache fwd, bwd;
};

// Runs both directions from zero initial states over [T, d_in] frames and
// concatenates the projected outputs per frame into [T, 2*proj]. The
// backward direction's row t holds its state after consuming frames T-1..t.
Tensor bilstm_forward(const BiLstm& net, const Tensor& frames, BiLstmCache* cache = nullptr);

struct LstmpGrads {
  Tensor W_x, W_r, b, P;
};

struct BiLstmGrads {
  Tensor frames;
  LstmpGrads fwd, bwd;
};

BiLstmGrads bilstm_backward(const BiLstm& net, const BiLstmCache& cache, const Tensor& grad_out);

}  // namespace seqscript
