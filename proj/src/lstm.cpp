#include "seqscript/lstm.hpp"

#include <cmath>

namespace seqscript {

LstmpCell make_lstmp_cell(int d_in, int hidden, int proj) {
  LstmpCell c;
  c.W_x = Tensor({4 * hidden, d_in}, 0.0);
  c.W_r = Tensor({4 * hidden, proj}, 0.0);
  c.b = Tensor({4 * hidden}, 0.0);
  c.P = Tensor({proj, hidden}, 0.0);
  return c;
}

BiLstm make_bilstm(int d_in, int hidden, int proj) {
  return BiLstm{make_lstmp_cell(d_in, hidden, proj), make_lstmp_cell(d_in, hidden, proj)};
}

namespace {

inline double sigmoid1(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double z = std::exp(v);
  return z / (1.0 + z);
}

// One step over raw arrays; writes gates/state into the cache row t.
void step_raw(const LstmpCell& cell, const double* x, const double* r_prev, const double* c_prev,
              LstmDirCache& cache, int t) {
  const int H = cell.hidden(), Pdim = cell.proj(), D = cell.d_in();
  const double* wx = cell.W_x.data.data();
  const double* wr = cell.W_r.data.data();
  const double* b = cell.b.data.data();
  std::vector<double> z(static_cast<std::size_t>(4) * H);
  for (int row = 0; row < 4 * H; ++row) {
    const double* wxr = wx + static_cast<std::size_t>(row) * D;
    const double* wrr = wr + static_cast<std::size_t>(row) * Pdim;
    double acc = b[row];
    for (int d = 0; d < D; ++d) acc += wxr[d] * x[d];
    for (int p = 0; p < Pdim; ++p) acc += wrr[p] * r_prev[p];
    z[static_cast<std::size_t>(row)] = acc;
  }
  double* iv = cache.i.data() + static_cast<std::size_t>(t) * H;
  double* fv = cache.f.data() + static_cast<std::size_t>(t) * H;
  double* gv = cache.g.data() + static_cast<std::size_t>(t) * H;
  double* ov = cache.o.data() + static_cast<std::size_t>(t) * H;
  double* cv = cache.c.data() + static_cast<std::size_t>(t) * H;
  double* tcv = cache.tanh_c.data() + static_cast<std::size_t>(t) * H;
  double* hv = cache.h.data() + static_cast<std::size_t>(t) * H;
  double* rv = cache.r.data() + static_cast<std::size_t>(t) * Pdim;
  for (int j = 0; j < H; ++j) {
    iv[j] = sigmoid1(z[static_cast<std::size_t>(j)]);
    fv[j] = sigmoid1(z[static_cast<std::size_t>(H + j)]);
    gv[j] = std::tanh(z[static_cast<std::size_t>(2 * H + j)]);
    ov[j] = sigmoid1(z[static_cast<std::size_t>(3 * H + j)]);
    cv[j] = fv[j] * c_prev[j] + iv[j] * gv[j];
    tcv[j] = std::tanh(cv[j]);
    hv[j] = ov[j] * tcv[j];
  }
  const double* pm = cell.P.data.data();
  for (int p = 0; p < Pdim; ++p) {
    const double* prow = pm + static_cast<std::size_t>(p) * H;
    double acc = 0.0;
    for (int j = 0; j < H; ++j) acc += prow[j] * hv[j];
    rv[p] = acc;
  }
}

void init_dir_cache(LstmDirCache& c, int T, int H, int Pdim) {
  c.T = T;
  const std::size_t th = static_cast<std::size_t>(T) * H;
  c.i.assign(th, 0.0);
  c.f.assign(th, 0.0);
  c.g.assign(th, 0.0);
  c.o.assign(th, 0.0);
  c.c.assign(th, 0.0);
  c.tanh_c.assign(th, 0.0);
  c.h.assign(th, 0.0);
  c.r.assign(static_cast<std::size_t>(T) * Pdim, 0.0);
}

// Runs one direction over frame order given by frame_of(step). Step 0 uses
// zero initial state.
template <typename FrameOf>
void run_dir(const LstmpCell& cell, const Tensor& frames, LstmDirCache& cache, FrameOf frame_of) {
  const int T = frames.shape[0], D = frames.shape[1];
  const int H = cell.hidden(), Pdim = cell.proj();
  init_dir_cache(cache, T, H, Pdim);
  std::vector<double> zero_r(static_cast<std::size_t>(Pdim), 0.0);
  std::vector<double> zero_c(static_cast<std::size_t>(H), 0.0);
  for (int step = 0; step < T; ++step) {
    const int t = frame_of(step);
    const double* x = frames.data.data() + static_cast<std::size_t>(t) * D;
    const double* rp = step == 0 ? zero_r.data() : cache.r.data() + static_cast<std::size_t>(step - 1) * Pdim;
    const double* cp = step == 0 ? zero_c.data() : cache.c.data() + static_cast<std::size_t>(step - 1) * H;
    step_raw(cell, x, rp, cp, cache, step);
  }
}

struct DirGradAccum {
  LstmpGrads g;
  std::vector<double> grad_frames;  // [T, d_in] flattened
};

// BPTT over one direction. grad_r_of(step) yields the external gradient on
// the projected output of that step.
template <typename FrameOf, typename GradROf>
DirGradAccum backprop_dir(const LstmpCell& cell, const Tensor& frames, const LstmDirCache& cache,
                          FrameOf frame_of, GradROf grad_r_of) {
  const int T = cache.T, D = cell.d_in(), H = cell.hidden(), Pdim = cell.proj();
  DirGradAccum acc;
  acc.g.W_x = Tensor(cell.W_x.shape, 0.0);
  acc.g.W_r = Tensor(cell.W_r.shape, 0.0);
  acc.g.b = Tensor(cell.b.shape, 0.0);
  acc.g.P = Tensor(cell.P.shape, 0.0);
  acc.grad_frames.assign(static_cast<std::size_t>(T) * D, 0.0);

  std::vector<double> dr(static_cast<std::size_t>(Pdim), 0.0);   // carried into earlier steps
  std::vector<double> dc(static_cast<std::size_t>(H), 0.0);
  std::vector<double> dz(static_cast<std::size_t>(4) * H, 0.0);
  std::vector<double> dh(static_cast<std::size_t>(H), 0.0);

  const double* pm = cell.P.data.data();
  const double* wx = cell.W_x.data.data();
  const double* wr = cell.W_r.data.data();

  for (int step = T - 1; step >= 0; --step) {
    const int t = frame_of(step);
    const double* iv = cache.i.data() + static_cast<std::size_t>(step) * H;
    const double* fv = cache.f.data() + static_cast<std::size_t>(step) * H;
    const double* gv = cache.g.data() + static_cast<std::size_t>(step) * H;
    const double* ov = cache.o.data() + static_cast<std::size_t>(step) * H;
    const double* tcv = cache.tanh_c.data() + static_cast<std::size_t>(step) * H;
    const double* hv = cache.h.data() + static_cast<std::size_t>(step) * H;
    const double* c_prev =
        step == 0 ? nullptr : cache.c.data() + static_cast<std::size_t>(step - 1) * H;
    const double* r_prev =
        step == 0 ? nullptr : cache.r.data() + static_cast<std::size_t>(step - 1) * Pdim;

    const double* ext = grad_r_of(step);
    for (int p = 0; p < Pdim; ++p) dr[static_cast<std::size_t>(p)] += ext[p];

    // r = P h: dP += dr h^T, dh = P^T dr.
    std::fill(dh.begin(), dh.end(), 0.0);
    double* gp = acc.g.P.data.data();
    for (int p = 0; p < Pdim; ++p) {
      const double drp = dr[static_cast<std::size_t>(p)];
      const double* prow = pm + static_cast<std::size_t>(p) * H;
      double* gprow = gp + static_cast<std::size_t>(p) * H;
      for (int j = 0; j < H; ++j) {
        gprow[j] += drp * hv[j];
        dh[static_cast<std::size_t>(j)] += drp * prow[j];
      }
    }

    for (int j = 0; j < H; ++j) {
      const double dhj = dh[static_cast<std::size_t>(j)];
      const double do_ = dhj * tcv[j];
      double dcj = dc[static_cast<std::size_t>(j)] + dhj * ov[j] * (1.0 - tcv[j] * tcv[j]);
      const double di = dcj * gv[j];
      const double dg = dcj * iv[j];
      const double df = dcj * (c_prev ? c_prev[j] : 0.0);
      dc[static_cast<std::size_t>(j)] = dcj * fv[j];  // to step-1
      dz[static_cast<std::size_t>(j)] = di * iv[j] * (1.0 - iv[j]);
      dz[static_cast<std::size_t>(H + j)] = df * fv[j] * (1.0 - fv[j]);
      dz[static_cast<std::size_t>(2 * H + j)] = dg * (1.0 - gv[j] * gv[j]);
      dz[static_cast<std::size_t>(3 * H + j)] = do_ * ov[j] * (1.0 - ov[j]);
    }

    const double* x = frames.data.data() + static_cast<std::size_t>(t) * D;
    double* gx = acc.grad_frames.data() + static_cast<std::size_t>(t) * D;
    double* gwx = acc.g.W_x.data.data();
    double* gwr = acc.g.W_r.data.data();
    double* gb = acc.g.b.data.data();
    std::fill(dr.begin(), dr.end(), 0.0);
    for (int row = 0; row < 4 * H; ++row) {
      const double dzr = dz[static_cast<std::size_t>(row)];
      gb[row] += dzr;
      double* gwxr = gwx + static_cast<std::size_t>(row) * D;
      const double* wxr = wx + static_cast<std::size_t>(row) * D;
      for (int d = 0; d < D; ++d) {
        gwxr[d] += dzr * x[d];
        gx[d] += dzr * wxr[d];
      }
      if (r_prev) {
        double* gwrr = gwr + static_cast<std::size_t>(row) * Pdim;
        const double* wrr = wr + static_cast<std::size_t>(row) * Pdim;
        for (int p = 0; p < Pdim; ++p) {
          gwrr[p] += dzr * r_prev[p];
          dr[static_cast<std::size_t>(p)] += dzr * wrr[p];
        }
      }
    }
  }
  return acc;
}

}  // namespace

LstmStep lstmp_step(const LstmpCell& cell, const Tensor& x, const Tensor& r_prev,
                    const Tensor& c_prev) {
  if (x.rank() != 1 || x.shape[0] != cell.d_in())
    throw ShapeError("lstmp_step: x must be [d_in]");
  if (r_prev.rank() != 1 || r_prev.shape[0] != cell.proj())
    throw ShapeError("lstmp_step: r_prev must be [proj]");
  if (c_prev.rank() != 1 || c_prev.shape[0] != cell.hidden())
    throw ShapeError("lstmp_step: c_prev must be [hidden]");
  LstmDirCache cache;
  init_dir_cache(cache, 1, cell.hidden(), cell.proj());
  step_raw(cell, x.data.data(), r_prev.data.data(), c_prev.data.data(), cache, 0);
  LstmStep out;
  out.r = Tensor({cell.proj()}, 0.0);
  out.c = Tensor({cell.hidden()}, 0.0);
  std::copy(cache.r.begin(), cache.r.end(), out.r.data.begin());
  std::copy(cache.c.begin(), cache.c.end(), out.c.data.begin());
  return out;
}

Tensor bilstm_forward(const BiLstm& net, const Tensor& frames, BiLstmCache* cache) {
  if (frames.rank() != 2) throw ShapeError("bilstm_forward: frames must be [T, d_in]");
  if (frames.shape[0] < 1) throw ShapeError("bilstm_forward: empty sequence");
  if (frames.shape[1] != net.fwd.d_in() || frames.shape[1] != net.bwd.d_in())
    throw ShapeError("bilstm_forward: frame dim " + std::to_string(frames.shape[1]) +
                     " does not match cell input dim");
  const int T = frames.shape[0];
  const int pf = net.fwd.proj(), pb = net.bwd.proj();
  BiLstmCache local;
  BiLstmCache& c = cache ? *cache : local;
  c.frames = frames;
  run_dir(net.fwd, frames, c.fwd, [](int s) { return s; });
  run_dir(net.bwd, frames, c.bwd, [T](int s) { return T - 1 - s; });
  Tensor out({T, pf + pb}, 0.0);
  for (int t = 0; t < T; ++t) {
    const double* rf = c.fwd.r.data() + static_cast<std::size_t>(t) * pf;
    // backward step s visited frame T-1-s, so frame t is its step T-1-t
    const double* rb = c.bwd.r.data() + static_cast<std::size_t>(T - 1 - t) * pb;
    double* orow = out.data.data() + static_cast<std::size_t>(t) * (pf + pb);
    std::copy(rf, rf + pf, orow);
    std::copy(rb, rb + pb, orow + pf);
  }
  return out;
}

BiLstmGrads bilstm_backward(const BiLstm& net, const BiLstmCache& cache, const Tensor& grad_out) {
  if (cache.fwd.T == 0) throw InternalError("bilstm_backward: missing forward cache");
  const int T = cache.fwd.T;
  const int pf = net.fwd.proj(), pb = net.bwd.proj();
  if (grad_out.shape != std::vector<int>{T, pf + pb})
    throw ShapeError("bilstm_backward: grad_out must be [T, 2*proj]");

  // Split the concatenated gradient into per-direction step order.
  std::vector<double> gf(static_cast<std::size_t>(T) * pf), gb(static_cast<std::size_t>(T) * pb);
  for (int t = 0; t < T; ++t) {
    const double* grow = grad_out.data.data() + static_cast<std::size_t>(t) * (pf + pb);
    std::copy(grow, grow + pf, gf.data() + static_cast<std::size_t>(t) * pf);
    std::copy(grow + pf, grow + pf + pb,
              gb.data() + static_cast<std::size_t>(T - 1 - t) * pb);  // to bwd step order
  }

  DirGradAccum af = backprop_dir(net.fwd, cache.frames, cache.fwd, [](int s) { return s; },
                                 [&](int s) { return gf.data() + static_cast<std::size_t>(s) * pf; });
  DirGradAccum ab = backprop_dir(net.bwd, cache.frames, cache.bwd,
                                 [T](int s) { return T - 1 - s; },
                                 [&](int s) { return gb.data() + static_cast<std::size_t>(s) * pb; });

  BiLstmGrads out;
  out.fwd = std::move(af.g);
  out.bwd = std::move(ab.g);
  out.frames = Tensor(cache.frames.shape, 0.0);
  for (std::size_t k = 0; k < out.frames.size(); ++k)
    out.frames.data[k] = af.grad_frames[k] + ab.grad_frames[k];
  return out;
}

}  // namespace seqscript
