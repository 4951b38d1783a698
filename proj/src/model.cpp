#include "seqscript/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "seqscript/parallel.hpp"

namespace seqscript {

std::string site_name(AttentionSite site) {
  switch (site) {
    case AttentionSite::conv: return "conv";
    case AttentionSite::rb1: return "rb1";
    case AttentionSite::rb2: return "rb2";
    case AttentionSite::rb3: return "rb3";
  }
  return "?";
}

AttentionSite site_from_name(const std::string& name) {
  if (name == "conv") return AttentionSite::conv;
  if (name == "rb1") return AttentionSite::rb1;
  if (name == "rb2") return AttentionSite::rb2;
  if (name == "rb3") return AttentionSite::rb3;
  throw ConfigError("unknown attention site '" + name + "' (expected conv|rb1|rb2|rb3)");
}

std::vector<std::string> effective_script_names(const ArchConfig& config) {
  if (!config.script_names.empty()) return config.script_names;
  std::vector<std::string> names;
  for (int i = 1; i <= config.num_scripts; ++i) names.push_back("s" + std::to_string(i));
  return names;
}

void validate_config(const ArchConfig& config) {
  if (config.conv_filters.size() != 7)
    throw ConfigError("conv_filters must list exactly 7 output widths");
  for (int f : config.conv_filters)
    if (f < 1) throw ConfigError("conv filter counts must be positive");
  if (config.num_scripts < 2) throw ConfigError("num_scripts must be >= 2");
  if (config.lstm_hidden < 1 || config.lstm_proj < 1)
    throw ConfigError("lstm dims must be positive");
  if (config.input_height < 1) throw ConfigError("input_height must be positive");
  if (config.use_attention) {
    if (config.attention_sites.empty())
      throw ConfigError("use_attention is set but no attention sites are configured");
    std::vector<AttentionSite> seen;
    for (AttentionSite s : config.attention_sites) {
      if (std::find(seen.begin(), seen.end(), s) != seen.end())
        throw ConfigError("duplicate attention site " + site_name(s));
      seen.push_back(s);
    }
  }
  std::vector<int> bn_seen;
  for (int idx : config.bn_after_convs) {
    if (idx < 1 || idx > 7)
      throw ConfigError("bn_after_convs entries must be conv indices in 1..7");
    if (std::find(bn_seen.begin(), bn_seen.end(), idx) != bn_seen.end())
      throw ConfigError("duplicate bn_after_convs entry " + std::to_string(idx));
    bn_seen.push_back(idx);
  }
  if (!config.script_names.empty() &&
      static_cast<int>(config.script_names.size()) != config.num_scripts)
    throw ConfigError("script_names must match num_scripts");
  for (const std::string& n : config.script_names)
    if (n.empty() || n.find(',') != std::string::npos || n.find('\n') != std::string::npos)
      throw ConfigError("script names must be non-empty and free of commas/newlines");
  // the pool chain must keep the height alive
  int h = config.input_height;
  for (const MaxPoolSpec& p : pool_chain(config)) {
    if (h < p.pool_h)
      throw ConfigError("input_height " + std::to_string(config.input_height) +
                        " collapses before the pool chain ends");
    h = (h - p.pool_h) / p.stride_h + 1;
  }
}

std::vector<MaxPoolSpec> pool_chain(const ArchConfig& config) {
  const int s1 = config.first_pool_stride3 ? 3 : 2;
  return {
      {3, 3, s1, s1},  // after conv1
      {2, 2, 2, 2},    // after rb1
      {2, 1, 2, 1},    // after rb2: height only
      {2, 1, 2, 1},    // after rb3: height only
  };
}

int frame_count(const ArchConfig& config, int width) {
  int w = width;
  int stage = 0;
  for (const MaxPoolSpec& p : pool_chain(config)) {
    ++stage;
    if (w < p.pool_w)
      throw ShapeError("crop width " + std::to_string(width) + " too small: pool stage " +
                       std::to_string(stage) + " sees width " + std::to_string(w) +
                       " < window " + std::to_string(p.pool_w));
    w = (w - p.pool_w) / p.stride_w + 1;
  }
  return w;
}

int final_height(const ArchConfig& config) {
  int h = config.input_height;
  for (const MaxPoolSpec& p : pool_chain(config)) h = (h - p.pool_h) / p.stride_h + 1;
  return h;
}

int frame_dim(const ArchConfig& config) {
  return final_height(config) * config.conv_filters[6];
}

int min_crop_width(const ArchConfig& config) {
  for (int w = 1; w <= 256; ++w) {
    try {
      frame_count(config, w);
      return w;
    } catch (const ShapeError&) {
    }
  }
  throw InternalError("no feasible crop width up to 256");
}

ClassAlphabet Model::alphabet() const {
  ClassAlphabet a;
  a.scripts = effective_script_names(config);
  return a;
}

const SpatialAttention* Model::attention_at(AttentionSite site) const {
  for (const auto& [s, att] : attention)
    if (s == site) return &att;
  return nullptr;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Per-tensor init stream so layer toggles never shift other layers' draws.
Rng init_stream(std::uint64_t seed, const std::string& name) {
  return Rng(seed).split(fnv1a(name));
}

void init_conv(ConvLayer& l, std::uint64_t seed, const std::string& name) {
  const double fan_in = static_cast<double>(l.kh()) * l.kw() * l.c_in();
  Rng rng = init_stream(seed, name);
  l.weights = rng_normal(rng, l.weights.shape, std::sqrt(2.0 / fan_in));
}

void init_lstm_cell(LstmpCell& c, std::uint64_t seed, const std::string& name) {
  Rng rng = init_stream(seed, name);
  c.W_x = rng_normal(rng, c.W_x.shape, 0.05);
  c.W_r = rng_normal(rng, c.W_r.shape, 0.05);
  c.P = rng_normal(rng, c.P.shape, 0.05);
  // forget-gate bias starts at 1 to keep early memory alive
  const int h = c.hidden();
  for (int j = 0; j < h; ++j) c.b(h + j) = 1.0;
}

constexpr char kMagic[4] = {'S', 'S', 'I', 'D'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

Model build(const ArchConfig& config, std::uint64_t seed) {
  validate_config(config);
  Model m;
  m.config = config;
  m.seed = seed;
  const std::vector<int>& f = config.conv_filters;

  m.conv1 = make_conv3x3(1, f[0]);
  init_conv(m.conv1, seed, "conv1");
  m.rb1 = make_residue_block(f[0], f[1], f[2], config.use_residual);
  m.rb2 = make_residue_block(f[2], f[3], f[4], config.use_residual);
  m.rb3 = make_residue_block(f[4], f[5], f[6], config.use_residual);
  const char* rb_names[] = {"rb1", "rb2", "rb3"};
  ResidueBlock* rbs[] = {&m.rb1, &m.rb2, &m.rb3};
  for (int i = 0; i < 3; ++i) {
    const std::string base = rb_names[i];
    init_conv(rbs[i]->conv_a, seed, base + ".conv_a");
    init_conv(rbs[i]->conv_b, seed, base + ".conv_b");
    if (rbs[i]->skip_proj) init_conv(*rbs[i]->skip_proj, seed, base + ".skip");
  }

  if (config.use_attention) {
    std::vector<AttentionSite> ordered = config.attention_sites;
    std::sort(ordered.begin(), ordered.end(),
              [](AttentionSite a, AttentionSite b) { return static_cast<int>(a) < static_cast<int>(b); });
    for (AttentionSite s : ordered) {
      SpatialAttention att = make_spatial_attention(config.attention_gate);
      // zero weights keep the gate uniform, but the bias must start positive:
      // at pre-activation exactly 0 the relu gate passes no gradient at all
      att.conv.bias(0) = 0.1;
      m.attention.emplace_back(s, std::move(att));
    }
  }

  // BN channel width = output of the indexed conv
  const int conv_out[8] = {0, f[0], f[1], f[2], f[3], f[4], f[5], f[6]};
  for (int idx : config.bn_after_convs) m.bn.emplace(idx, make_batchnorm(conv_out[idx]));

  m.lstm = make_bilstm(frame_dim(config), config.lstm_hidden, config.lstm_proj);
  init_lstm_cell(m.lstm.fwd, seed, "lstm.fwd");
  init_lstm_cell(m.lstm.bwd, seed, "lstm.bwd");

  m.fc = make_fc(2 * config.lstm_proj, config.num_classes());
  {
    Rng rng = init_stream(seed, "fc");
    m.fc.weights = rng_normal(rng, m.fc.weights.shape, std::sqrt(2.0 / (2 * config.lstm_proj)));
  }
  return m;
}

namespace {

void collect_params(Model& m, bool with_running_stats, std::vector<ParamRef>& out) {
  auto push = [&out](const std::string& name, Tensor& t) { out.push_back({name, &t}); };
  auto push_bn = [&](int idx) {
    auto it = m.bn.find(idx);
    if (it == m.bn.end()) return;
    const std::string base = "bn" + std::to_string(idx);
    push(base + ".gamma", it->second.gamma);
    push(base + ".beta", it->second.beta);
    if (with_running_stats) {
      push(base + ".running_mean", it->second.running_mean);
      push(base + ".running_var", it->second.running_var);
    }
  };
  auto push_sa = [&](AttentionSite site) {
    for (auto& [s, att] : m.attention)
      if (s == site) {
        const std::string base = "sa_" + site_name(site);
        push(base + ".w", att.conv.weights);
        push(base + ".b", att.conv.bias);
      }
  };

  push("conv1.w", m.conv1.weights);
  push("conv1.b", m.conv1.bias);
  push_bn(1);
  push_sa(AttentionSite::conv);
  const char* rb_names[] = {"rb1", "rb2", "rb3"};
  ResidueBlock* rbs[] = {&m.rb1, &m.rb2, &m.rb3};
  const AttentionSite rb_sites[] = {AttentionSite::rb1, AttentionSite::rb2, AttentionSite::rb3};
  for (int i = 0; i < 3; ++i) {
    const std::string base = rb_names[i];
    push(base + ".conv_a.w", rbs[i]->conv_a.weights);
    push(base + ".conv_a.b", rbs[i]->conv_a.bias);
    push_bn(2 * i + 2);
    push(base + ".conv_b.w", rbs[i]->conv_b.weights);
    push(base + ".conv_b.b", rbs[i]->conv_b.bias);
    push_bn(2 * i + 3);
    if (rbs[i]->skip_proj) {
      push(base + ".skip.w", rbs[i]->skip_proj->weights);
      push(base + ".skip.b", rbs[i]->skip_proj->bias);
    }
    push_sa(rb_sites[i]);
  }
  push("lstm.fwd.w_x", m.lstm.fwd.W_x);
  push("lstm.fwd.w_r", m.lstm.fwd.W_r);
  push("lstm.fwd.b", m.lstm.fwd.b);
  push("lstm.fwd.p", m.lstm.fwd.P);
  push("lstm.bwd.w_x", m.lstm.bwd.W_x);
  push("lstm.bwd.w_r", m.lstm.bwd.W_r);
  push("lstm.bwd.b", m.lstm.bwd.b);
  push("lstm.bwd.p", m.lstm.bwd.P);
  push("fc.w", m.fc.weights);
  push("fc.b", m.fc.bias);
}

}  // namespace

std::vector<ParamRef> model_params(Model& model) {
  std::vector<ParamRef> out;
  collect_params(model, false, out);
  return out;
}

std::vector<ParamRef> model_state_tensors(Model& model) {
  std::vector<ParamRef> out;
  collect_params(model, true, out);
  return out;
}

long long param_count(const Model& model) {
  long long total = 0;
  for (const ParamRef& p : model_params(const_cast<Model&>(model)))
    total += static_cast<long long>(p.tensor->size());
  return total;
}

std::vector<ParamCountRow> param_breakdown(const Model& model) {
  std::vector<ParamCountRow> rows;
  for (const ParamRef& p : model_params(const_cast<Model&>(model)))
    rows.push_back({p.name, static_cast<long long>(p.tensor->size())});
  return rows;
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

Tensor assemble_batch(const std::vector<Tensor>& xs) {
  const int n = static_cast<int>(xs.size());
  std::vector<int> shape = {n};
  shape.insert(shape.end(), xs[0].shape.begin(), xs[0].shape.end());
  Tensor batch(shape, 0.0);
  const std::size_t per = xs[0].size();
  for (int i = 0; i < n; ++i)
    std::memcpy(batch.data.data() + static_cast<std::size_t>(i) * per, xs[static_cast<std::size_t>(i)].data.data(),
                per * sizeof(double));
  return batch;
}

std::vector<Tensor> scatter_batch(const Tensor& batch) {
  const int n = batch.shape[0];
  std::vector<int> shape(batch.shape.begin() + 1, batch.shape.end());
  std::vector<Tensor> out(static_cast<std::size_t>(n));
  const std::size_t per = batch.size() / static_cast<std::size_t>(n);
  for (int i = 0; i < n; ++i) {
    Tensor t(shape, 0.0);
    std::memcpy(t.data.data(), batch.data.data() + static_cast<std::size_t>(i) * per,
                per * sizeof(double));
    out[static_cast<std::size_t>(i)] = std::move(t);
  }
  return out;
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.data.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

struct SaStageCache {
  bool used = false;
  std::vector<AttentionCache> per_sample;
};

struct ConvStageCache {
  std::vector<Tensor> input;    // conv input per sample
  std::vector<Tensor> pre;      // conv output
  bool bn_used = false;
  BatchNormCache bn;
  std::vector<Tensor> relu_in;  // BN output when bn_used, else empty (= pre)
  std::vector<Tensor> act;      // relu output
};

struct RbStageCache {
  ConvStageCache a, b;
  // block output before SA/pool is implicit; skip input is a.input
};

}  // namespace

struct ModelCache {
  Mode mode = Mode::train;
  int n = 0;
  ConvStageCache conv1;
  SaStageCache sa[4];  // indexed by AttentionSite
  std::vector<MaxPoolResult> pool[4];
  RbStageCache rb[3];
  std::vector<int> frame_len;
  std::vector<Tensor> frames;         // [T_s, dim]
  std::vector<BiLstmCache> lstm;
  std::vector<Tensor> lstm_out;       // [T_s, 2p]
  std::vector<int> p4_shape;          // pooled feature-map shape [Hf, W', C]
};

namespace {

// conv -> optional BN -> relu over the whole batch; fills the stage cache.
// Returns the activations per sample.
std::vector<Tensor> conv_bn_relu(const ConvLayer& conv, BatchNormLayer* bn, Mode mode,
                                 std::vector<Tensor> input, ConvStageCache* cache, int threads) {
  const int n = static_cast<int>(input.size());
  std::vector<Tensor> pre(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i)
      pre[static_cast<std::size_t>(i)] = conv2d_forward(conv, input[static_cast<std::size_t>(i)]);
  });
  std::vector<Tensor> relu_in;
  if (bn) {
    Tensor normed = batchnorm_forward(*bn, assemble_batch(pre), mode, cache ? &cache->bn : nullptr);
    relu_in = scatter_batch(normed);
  }
  const std::vector<Tensor>& src = bn ? relu_in : pre;
  std::vector<Tensor> act(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i) act[static_cast<std::size_t>(i)] = relu(src[static_cast<std::size_t>(i)]);
  });
  if (cache) {
    cache->input = std::move(input);
    cache->pre = std::move(pre);
    cache->bn_used = bn != nullptr;
    cache->relu_in = std::move(relu_in);
    cache->act = act;
  }
  return act;
}

BatchNormLayer* bn_at(Model& m, int conv_idx) {
  auto it = m.bn.find(conv_idx);
  return it == m.bn.end() ? nullptr : &it->second;
}

SpatialAttention* sa_at(Model& m, AttentionSite site) {
  for (auto& [s, att] : m.attention)
    if (s == site) return &att;
  return nullptr;
}

// Applies SA at `site` in place if configured; fills cache and probe.
void apply_sa(Model& m, AttentionSite site, std::vector<Tensor>& act, ModelCache* cache,
              ForwardProbe* probe, int threads) {
  SpatialAttention* sa = sa_at(m, site);
  if (!sa) return;
  const int n = static_cast<int>(act.size());
  SaStageCache* sc = cache ? &cache->sa[static_cast<int>(site)] : nullptr;
  if (sc) {
    sc->used = true;
    sc->per_sample.resize(static_cast<std::size_t>(n));
  }
  std::vector<Tensor> out(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i)
      out[static_cast<std::size_t>(i)] = attention_forward(
          *sa, act[static_cast<std::size_t>(i)], sc ? &sc->per_sample[static_cast<std::size_t>(i)] : nullptr);
  });
  if (probe) {
    AttentionCache pc;
    Tensor po = attention_forward(*sa, act[0], &pc);
    probe->sites.push_back(site);
    probe->maps.push_back(pc.t);
    probe->pre_mean.push_back(channel_mean(act[0]));
    probe->post_mean.push_back(channel_mean(po));
  }
  act = std::move(out);
}

std::vector<Tensor> pool_stage(const MaxPoolSpec& spec, const std::vector<Tensor>& act,
                               std::vector<MaxPoolResult>* keep, int threads) {
  const int n = static_cast<int>(act.size());
  std::vector<MaxPoolResult> res(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i)
      res[static_cast<std::size_t>(i)] = maxpool_forward(spec, act[static_cast<std::size_t>(i)]);
  });
  std::vector<Tensor> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::move(res[static_cast<std::size_t>(i)].output);
  if (keep) {
    for (int i = 0; i < n; ++i) res[static_cast<std::size_t>(i)].output = Tensor();
    *keep = std::move(res);
  }
  return out;
}

BatchForward forward_impl(Model& m, const std::vector<Tensor>& crops, Mode mode, bool want_cache,
                          ForwardProbe* probe) {
  if (crops.empty()) throw ShapeError("model forward: empty batch");
  const ArchConfig& cfg = m.config;
  const int n = static_cast<int>(crops.size());
  int w_max = 0;
  std::vector<int> frame_len(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Tensor& c = crops[static_cast<std::size_t>(i)];
    if (c.rank() != 3 || c.shape[0] != cfg.input_height || c.shape[2] != 1)
      throw ShapeError("crop must be [" + std::to_string(cfg.input_height) + ",W,1], got " +
                       shape_str(c.shape));
    frame_len[static_cast<std::size_t>(i)] = frame_count(cfg, c.shape[1]);  // throws when undersized
    w_max = std::max(w_max, c.shape[1]);
  }

  const int threads = thread_budget();
  std::shared_ptr<ModelCache> cache = want_cache ? std::make_shared<ModelCache>() : nullptr;
  if (cache) {
    cache->mode = mode;
    cache->n = n;
    cache->frame_len = frame_len;
  }

  // right-pad with zeros to the widest crop
  std::vector<Tensor> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Tensor& c = crops[static_cast<std::size_t>(i)];
    Tensor padded({cfg.input_height, w_max, 1}, 0.0);
    for (int h = 0; h < cfg.input_height; ++h)
      std::memcpy(padded.data.data() + static_cast<std::size_t>(h) * w_max,
                  c.data.data() + static_cast<std::size_t>(h) * c.shape[1],
                  static_cast<std::size_t>(c.shape[1]) * sizeof(double));
    x[static_cast<std::size_t>(i)] = std::move(padded);
  }

  const std::vector<MaxPoolSpec> pools = pool_chain(cfg);

  std::vector<Tensor> act = conv_bn_relu(m.conv1, bn_at(m, 1), mode, std::move(x),
                                         cache ? &cache->conv1 : nullptr, threads);
  apply_sa(m, AttentionSite::conv, act, cache.get(), probe, threads);
  act = pool_stage(pools[0], act, cache ? &cache->pool[0] : nullptr, threads);

  ResidueBlock* rbs[] = {&m.rb1, &m.rb2, &m.rb3};
  const AttentionSite rb_sites[] = {AttentionSite::rb1, AttentionSite::rb2, AttentionSite::rb3};
  for (int bi = 0; bi < 3; ++bi) {
    ResidueBlock& rb = *rbs[bi];
    RbStageCache* rc = cache ? &cache->rb[bi] : nullptr;
    std::vector<Tensor> input = act;  // skip path needs it
    std::vector<Tensor> h1 = conv_bn_relu(rb.conv_a, bn_at(m, 2 * bi + 2), mode, std::move(act),
                                          rc ? &rc->a : nullptr, threads);
    std::vector<Tensor> h2 = conv_bn_relu(rb.conv_b, bn_at(m, 2 * bi + 3), mode, std::move(h1),
                                          rc ? &rc->b : nullptr, threads);
    if (rb.use_skip) {
      parallel_chunks(n, threads, [&](int b, int e, int) {
        for (int i = b; i < e; ++i) {
          Tensor& out = h2[static_cast<std::size_t>(i)];
          const Tensor& in = input[static_cast<std::size_t>(i)];
          if (rb.skip_proj)
            out = add(out, conv2d_forward(*rb.skip_proj, in));
          else
            out = add(out, in);
        }
      });
    }
    act = std::move(h2);
    apply_sa(m, rb_sites[bi], act, cache.get(), probe, threads);
    act = pool_stage(pools[static_cast<std::size_t>(bi + 1)], act,
                     cache ? &cache->pool[bi + 1] : nullptr, threads);
  }

  if (cache) cache->p4_shape = act[0].shape;

  // height-major collapse of each surviving column into one frame
  const int hf = act[0].shape[0], wf = act[0].shape[1], cf = act[0].shape[2];
  const int dim = hf * cf;
  BatchForward out;
  out.frame_len = frame_len;
  out.logits.resize(static_cast<std::size_t>(n));
  out.probs.resize(static_cast<std::size_t>(n));
  if (cache) {
    cache->frames.resize(static_cast<std::size_t>(n));
    cache->lstm.resize(static_cast<std::size_t>(n));
    cache->lstm_out.resize(static_cast<std::size_t>(n));
  }
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i) {
      const Tensor& fm = act[static_cast<std::size_t>(i)];
      const int T = frame_len[static_cast<std::size_t>(i)];
      (void)wf;
      Tensor frames({T, dim}, 0.0);
      for (int t = 0; t < T; ++t)
        for (int h = 0; h < hf; ++h)
          for (int c = 0; c < cf; ++c) frames(t, h * cf + c) = fm(h, t, c);
      BiLstmCache* lc = cache ? &cache->lstm[static_cast<std::size_t>(i)] : nullptr;
      Tensor seq = bilstm_forward(m.lstm, frames, lc);
      Tensor logits = fc_forward(m.fc, seq);
      out.probs[static_cast<std::size_t>(i)] = softmax(logits);
      out.logits[static_cast<std::size_t>(i)] = std::move(logits);
      if (cache) {
        cache->frames[static_cast<std::size_t>(i)] = std::move(frames);
        cache->lstm_out[static_cast<std::size_t>(i)] = std::move(seq);
      }
    }
  });
  out.cache = cache;
  return out;
}

}  // namespace

BatchForward model_forward_batch(Model& model, const std::vector<Tensor>& crops, Mode mode,
                                 bool want_cache) {
  return forward_impl(model, crops, mode, want_cache, nullptr);
}

Tensor model_forward(Model& model, const Tensor& crop, Mode mode, ForwardProbe* probe) {
  BatchForward f = forward_impl(model, {crop}, mode, false, probe);
  return std::move(f.probs[0]);
}

GradSet zero_grads(Model& model) {
  GradSet g;
  for (const ParamRef& p : model_params(model)) g.tensors.emplace_back(p.tensor->shape, 0.0);
  return g;
}

namespace {

// Chunk-local parameter gradients, reduced in chunk order at the end.
struct GradAccum {
  std::vector<GradSet> per_chunk;
  std::map<std::string, int> index;

  GradAccum(Model& m, int chunks) {
    const std::vector<ParamRef> params = model_params(m);
    for (std::size_t i = 0; i < params.size(); ++i)
      index[params[i].name] = static_cast<int>(i);
    per_chunk.resize(static_cast<std::size_t>(chunks));
    for (GradSet& g : per_chunk) g = zero_grads(m);
  }

  Tensor& at(int chunk, const std::string& name) {
    return per_chunk[static_cast<std::size_t>(chunk)]
        .tensors[static_cast<std::size_t>(index.at(name))];
  }

  GradSet reduce() {
    GradSet total = std::move(per_chunk[0]);
    for (std::size_t c = 1; c < per_chunk.size(); ++c)
      for (std::size_t i = 0; i < total.tensors.size(); ++i)
        add_into(total.tensors[i], per_chunk[c].tensors[i]);
    return total;
  }
};

// relu (+ optional BN) + conv backward for one stage. grad arrives at the
// relu output; returns the gradient at the conv input.
std::vector<Tensor> conv_bn_relu_backward(Model& m, const ConvLayer& conv, int conv_idx,
                                          const ConvStageCache& sc, std::vector<Tensor> grad,
                                          GradAccum& acc, const std::string& wname,
                                          const std::string& bname, int threads) {
  const int n = static_cast<int>(grad.size());
  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i) {
      const Tensor& relu_in =
          sc.bn_used ? sc.relu_in[static_cast<std::size_t>(i)] : sc.pre[static_cast<std::size_t>(i)];
      grad[static_cast<std::size_t>(i)] =
          relu_backward(relu_in, grad[static_cast<std::size_t>(i)]);
    }
  });
  if (sc.bn_used) {
    BatchNormLayer* bn = bn_at(m, conv_idx);
    BatchNormGrads bg = batchnorm_backward(*bn, sc.bn, assemble_batch(grad));
    const std::string base = "bn" + std::to_string(conv_idx);
    add_into(acc.at(0, base + ".gamma"), bg.gamma);
    add_into(acc.at(0, base + ".beta"), bg.beta);
    grad = scatter_batch(bg.input);
  }
  std::vector<Tensor> grad_in(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int ci) {
    Tensor gw(conv.weights.shape, 0.0), gb(conv.bias.shape, 0.0);
    for (int i = b; i < e; ++i) {
      conv2d_backward_params(conv, sc.input[static_cast<std::size_t>(i)],
                             grad[static_cast<std::size_t>(i)], gw, gb);
      grad_in[static_cast<std::size_t>(i)] = conv2d_backward_input(
          conv, sc.input[static_cast<std::size_t>(i)].shape, grad[static_cast<std::size_t>(i)]);
    }
    add_into(acc.at(ci, wname), gw);
    add_into(acc.at(ci, bname), gb);
  });
  return grad_in;
}

std::vector<Tensor> sa_backward_stage(Model& m, AttentionSite site, ModelCache& cache,
                                      std::vector<Tensor> grad, GradAccum& acc, int threads) {
  SaStageCache& sc = cache.sa[static_cast<int>(site)];
  if (!sc.used) return grad;
  SpatialAttention* sa = sa_at(m, site);
  const int n = static_cast<int>(grad.size());
  const std::string base = "sa_" + site_name(site);
  parallel_chunks(n, threads, [&](int b, int e, int ci) {
    Tensor gw(sa->conv.weights.shape, 0.0), gb(sa->conv.bias.shape, 0.0);
    for (int i = b; i < e; ++i) {
      AttentionGrads g = attention_backward(*sa, sc.per_sample[static_cast<std::size_t>(i)],
                                            grad[static_cast<std::size_t>(i)]);
      grad[static_cast<std::size_t>(i)] = std::move(g.input);
      add_into(gw, g.conv_weights);
      add_into(gb, g.conv_bias);
    }
    add_into(acc.at(ci, base + ".w"), gw);
    add_into(acc.at(ci, base + ".b"), gb);
  });
  return grad;
}

}  // namespace

GradSet model_backward(Model& model, ModelCache& cache, const std::vector<Tensor>& grad_logits) {
  if (cache.n == 0) throw InternalError("model_backward: missing forward cache");
  if (cache.mode != Mode::train)
    throw InternalError("model_backward: cache must come from a train-mode forward");
  const int n = cache.n;
  if (static_cast<int>(grad_logits.size()) != n)
    throw ShapeError("model_backward: grad_logits count mismatch");

  const int threads = thread_budget();
  const int chunks = std::max(1, std::min(threads, n));
  GradAccum acc(model, chunks);
  const ArchConfig& cfg = model.config;
  const int hf = cache.p4_shape[0], cf = cache.p4_shape[2];

  // head: fc + bilstm + frame scatter
  std::vector<Tensor> grad_p4(static_cast<std::size_t>(n));
  parallel_chunks(n, threads, [&](int b, int e, int ci) {
    Tensor gfw(model.fc.weights.shape, 0.0), gfb(model.fc.bias.shape, 0.0);
    LstmpGrads gf{Tensor(model.lstm.fwd.W_x.shape, 0.0), Tensor(model.lstm.fwd.W_r.shape, 0.0),
                  Tensor(model.lstm.fwd.b.shape, 0.0), Tensor(model.lstm.fwd.P.shape, 0.0)};
    LstmpGrads gb{Tensor(model.lstm.bwd.W_x.shape, 0.0), Tensor(model.lstm.bwd.W_r.shape, 0.0),
                  Tensor(model.lstm.bwd.b.shape, 0.0), Tensor(model.lstm.bwd.P.shape, 0.0)};
    for (int i = b; i < e; ++i) {
      FcGrads fg = fc_backward(model.fc, cache.lstm_out[static_cast<std::size_t>(i)],
                               grad_logits[static_cast<std::size_t>(i)]);
      add_into(gfw, fg.weights);
      add_into(gfb, fg.bias);
      BiLstmGrads lg =
          bilstm_backward(model.lstm, cache.lstm[static_cast<std::size_t>(i)], fg.input);
      add_into(gf.W_x, lg.fwd.W_x);
      add_into(gf.W_r, lg.fwd.W_r);
      add_into(gf.b, lg.fwd.b);
      add_into(gf.P, lg.fwd.P);
      add_into(gb.W_x, lg.bwd.W_x);
      add_into(gb.W_r, lg.bwd.W_r);
      add_into(gb.b, lg.bwd.b);
      add_into(gb.P, lg.bwd.P);
      // frames -> pooled feature map, zero beyond the true columns
      Tensor gp(cache.p4_shape, 0.0);
      const int T = cache.frame_len[static_cast<std::size_t>(i)];
      for (int t = 0; t < T; ++t)
        for (int h = 0; h < hf; ++h)
          for (int c = 0; c < cf; ++c) gp(h, t, c) = lg.frames(t, h * cf + c);
      grad_p4[static_cast<std::size_t>(i)] = std::move(gp);
    }
    add_into(acc.at(ci, "fc.w"), gfw);
    add_into(acc.at(ci, "fc.b"), gfb);
    add_into(acc.at(ci, "lstm.fwd.w_x"), gf.W_x);
    add_into(acc.at(ci, "lstm.fwd.w_r"), gf.W_r);
    add_into(acc.at(ci, "lstm.fwd.b"), gf.b);
    add_into(acc.at(ci, "lstm.fwd.p"), gf.P);
    add_into(acc.at(ci, "lstm.bwd.w_x"), gb.W_x);
    add_into(acc.at(ci, "lstm.bwd.w_r"), gb.W_r);
    add_into(acc.at(ci, "lstm.bwd.b"), gb.b);
    add_into(acc.at(ci, "lstm.bwd.p"), gb.P);
  });

  std::vector<Tensor> grad = std::move(grad_p4);
  ResidueBlock* rbs[] = {&model.rb1, &model.rb2, &model.rb3};
  const char* rb_names[] = {"rb1", "rb2", "rb3"};
  const AttentionSite rb_sites[] = {AttentionSite::rb1, AttentionSite::rb2, AttentionSite::rb3};
  for (int bi = 2; bi >= 0; --bi) {
    ResidueBlock& rb = *rbs[bi];
    RbStageCache& rc = cache.rb[bi];
    const std::string base = rb_names[bi];

    parallel_chunks(n, threads, [&](int b, int e, int) {
      for (int i = b; i < e; ++i)
        grad[static_cast<std::size_t>(i)] = maxpool_backward(
            cache.pool[bi + 1][static_cast<std::size_t>(i)], grad[static_cast<std::size_t>(i)]);
    });
    grad = sa_backward_stage(model, rb_sites[bi], cache, std::move(grad), acc, threads);

    // split into the conv path and the skip path at the block output
    std::vector<Tensor> grad_skip;
    if (rb.use_skip) {
      if (rb.skip_proj) {
        grad_skip.resize(static_cast<std::size_t>(n));
        parallel_chunks(n, threads, [&](int b, int e, int ci) {
          Tensor gw(rb.skip_proj->weights.shape, 0.0), gb(rb.skip_proj->bias.shape, 0.0);
          for (int i = b; i < e; ++i) {
            conv2d_backward_params(*rb.skip_proj, rc.a.input[static_cast<std::size_t>(i)],
                                   grad[static_cast<std::size_t>(i)], gw, gb);
            grad_skip[static_cast<std::size_t>(i)] =
                conv2d_backward_input(*rb.skip_proj, rc.a.input[static_cast<std::size_t>(i)].shape,
                                      grad[static_cast<std::size_t>(i)]);
          }
          add_into(acc.at(ci, base + ".skip.w"), gw);
          add_into(acc.at(ci, base + ".skip.b"), gb);
        });
      } else {
        grad_skip = grad;  // identity skip
      }
    }

    grad = conv_bn_relu_backward(model, rb.conv_b, 2 * bi + 3, rc.b, std::move(grad), acc,
                                 base + ".conv_b.w", base + ".conv_b.b", threads);
    grad = conv_bn_relu_backward(model, rb.conv_a, 2 * bi + 2, rc.a, std::move(grad), acc,
                                 base + ".conv_a.w", base + ".conv_a.b", threads);
    if (rb.use_skip) {
      parallel_chunks(n, threads, [&](int b, int e, int) {
        for (int i = b; i < e; ++i)
          add_into(grad[static_cast<std::size_t>(i)], grad_skip[static_cast<std::size_t>(i)]);
      });
    }
  }

  parallel_chunks(n, threads, [&](int b, int e, int) {
    for (int i = b; i < e; ++i)
      grad[static_cast<std::size_t>(i)] = maxpool_backward(
          cache.pool[0][static_cast<std::size_t>(i)], grad[static_cast<std::size_t>(i)]);
  });
  grad = sa_backward_stage(model, AttentionSite::conv, cache, std::move(grad), acc, threads);
  conv_bn_relu_backward(model, model.conv1, 1, cache.conv1, std::move(grad), acc, "conv1.w",
                        "conv1.b", threads);

  (void)cfg;
  return acc.reduce();
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[static_cast<std::size_t>(i)]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::string config_record(const Model& m) {
  const ArchConfig& c = m.config;
  std::ostringstream os;
  os << "input_height=" << c.input_height << '\n';
  os << "conv_filters=" << join_ints(c.conv_filters) << '\n';
  os << "attention_sites=";
  if (c.attention_sites.empty()) os << "none";
  for (std::size_t i = 0; i < c.attention_sites.size(); ++i)
    os << (i ? "," : "") << site_name(c.attention_sites[i]);
  os << '\n';
  os << "bn_after_convs=" << join_ints(c.bn_after_convs) << '\n';
  os << "lstm_hidden=" << c.lstm_hidden << '\n';
  os << "lstm_proj=" << c.lstm_proj << '\n';
  os << "num_scripts=" << c.num_scripts << '\n';
  os << "loss=" << (c.loss == LossKind::ctc ? "ctc" : "ce") << '\n';
  os << "use_attention=" << (c.use_attention ? 1 : 0) << '\n';
  os << "use_residual=" << (c.use_residual ? 1 : 0) << '\n';
  os << "attention_gate="
     << (c.attention_gate == AttentionGate::relu_sigmoid ? "relu_sigmoid" : "sigmoid_only") << '\n';
  os << "first_pool_stride3=" << (c.first_pool_stride3 ? 1 : 0) << '\n';
  std::vector<std::string> names = effective_script_names(c);
  os << "script_names=";
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
  os << '\n';
  os << "step=" << m.step << '\n';
  os << "seed=" << m.seed << '\n';
  return os.str();
}

ArchConfig parse_config_record(const std::string& text, long long& step, std::uint64_t& seed) {
  ArchConfig c;
  c.attention_sites.clear();
  c.bn_after_convs.clear();
  c.script_names.clear();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "checkpoint config record is malformed");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "input_height") c.input_height = std::stoi(val);
      else if (key == "conv_filters") c.conv_filters = split_ints(val);
      else if (key == "attention_sites") {
        if (val != "none") {
          std::istringstream vs(val);
          std::string tok;
          while (std::getline(vs, tok, ',')) c.attention_sites.push_back(site_from_name(tok));
        }
      } else if (key == "bn_after_convs") c.bn_after_convs = split_ints(val);
      else if (key == "lstm_hidden") c.lstm_hidden = std::stoi(val);
      else if (key == "lstm_proj") c.lstm_proj = std::stoi(val);
      else if (key == "num_scripts") c.num_scripts = std::stoi(val);
      else if (key == "loss") c.loss = val == "ce" ? LossKind::cross_entropy : LossKind::ctc;
      else if (key == "use_attention") c.use_attention = val == "1";
      else if (key == "use_residual") c.use_residual = val == "1";
      else if (key == "attention_gate")
        c.attention_gate =
            val == "sigmoid_only" ? AttentionGate::sigmoid_only : AttentionGate::relu_sigmoid;
      else if (key == "first_pool_stride3") c.first_pool_stride3 = val == "1";
      else if (key == "script_names") {
        std::istringstream vs(val);
        std::string tok;
        while (std::getline(vs, tok, ',')) c.script_names.push_back(tok);
      } else if (key == "step") step = std::stoll(val);
      else if (key == "seed") seed = std::stoull(val);
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "checkpoint config value for '" + key + "' is malformed");
    }
  }
  return c;
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  Model& m = const_cast<Model&>(model);
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = config_record(model);
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const std::vector<ParamRef> tensors = model_state_tensors(m);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const ParamRef& p : tensors) {
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    put_u8(out, static_cast<std::uint8_t>(p.tensor->rank()));
    for (int d : p.tensor->shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.tensor->data) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};

  const std::string magic = r.bytes(4);
  if (magic != std::string(kMagic, 4))
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t cfg_len = r.u32();
  const std::string cfg_text = r.bytes(cfg_len);
  long long step = 0;
  std::uint64_t seed = 0;
  ArchConfig config = parse_config_record(cfg_text, step, seed);
  Model m = build(config, seed);
  m.step = step;

  std::map<std::string, Tensor*> by_name;
  for (const ParamRef& p : model_state_tensors(m)) by_name[p.name] = p.tensor;

  const std::uint32_t count = r.u32();
  if (count != by_name.size())
    throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                          "checkpoint lists " + std::to_string(count) + " tensors, model needs " +
                              std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "checkpoint tensor '" + name + "' has no slot in the model");
    const int rank = r.u8();
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int d = 0; d < rank; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(r.u32());
    if (shape != it->second->shape)
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                                ", model expects " + shape_str(it->second->shape));
    for (double& v : it->second->data) v = r.f64();
  }
  return m;
}

}  // namespace seqscript
