#pragma once
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "seqscript/attention.hpp"
#include "seqscript/ctc.hpp"
#include "seqscript/layers.hpp"
#include "seqscript/lstm.hpp"
#include "seqscript/residue.hpp"

namespace seqscript {

// Where a spatial attention block can sit: right after the named stage's
// conv/residue output, before that stage's pool.
enum class AttentionSite { conv, rb1, rb2, rb3 };

std::string site_name(AttentionSite site);
AttentionSite site_from_name(const std::string& name);

enum class LossKind { ctc, cross_entropy };

struct ArchConfig {
  int input_height = 24;
  // conv1 then (conv_a, conv_b) of the three residue blocks
  std::vector<int> conv_filters = {32, 64, 96, 128, 164, 196, 256};
  std::vector<AttentionSite> attention_sites = {AttentionSite::rb1, AttentionSite::rb2};
  std::vector<int> bn_after_convs = {3, 5};  // 1-based conv indices
  int lstm_hidden = 256;
  int lstm_proj = 96;
  int num_scripts = 4;
  LossKind loss = LossKind::ctc;
  bool use_attention = true;
  bool use_residual = true;
  AttentionGate attention_gate = AttentionGate::relu_sigmoid;
  // The pool after conv1 is a 3x3 window with stride 2x2 by default; this
  // switches it to stride 3x3.
  bool first_pool_stride3 = false;
  std::vector<std::string> script_names;  // empty -> s1..sN

  int num_classes() const { return num_scripts + 1; }
};

void validate_config(const ArchConfig& config);
std::vector<std::string> effective_script_names(const ArchConfig& config);

struct Model {
  ArchConfig config;
  ConvLayer conv1;
  ResidueBlock rb1, rb2, rb3;
  // present only for configured sites, in pipeline order
  std::vector<std::pair<AttentionSite, SpatialAttention>> attention;
  std::map<int, BatchNormLayer> bn;  // keyed by 1-based conv index
  BiLstm lstm;
  FcLayer fc;
  long long step = 0;
  std::uint64_t seed = 0;

  ClassAlphabet alphabet() const;
  const SpatialAttention* attention_at(AttentionSite site) const;
};

Model build(const ArchConfig& config, std::uint64_t seed);

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

// Learnable parameters in a fixed pipeline order; the optimizer, gradient
// set and checkpoint all share it.
std::vector<ParamRef> model_params(Model& model);
// Learnable parameters plus BN running statistics (everything a checkpoint
// stores).
std::vector<ParamRef> model_state_tensors(Model& model);

struct ParamCountRow {
  std::string name;
  long long count;
};

long long param_count(const Model& model);
std::vector<ParamCountRow> param_breakdown(const Model& model);

// Pool geometry: four pools (after conv1 and after each residue block).
std::vector<MaxPoolSpec> pool_chain(const ArchConfig& config);
// Frames produced for a crop of the given width (the surviving columns).
// Throws ShapeError naming the failing pool when the crop is too narrow.
int frame_count(const ArchConfig& config, int width);
int final_height(const ArchConfig& config);
int frame_dim(const ArchConfig& config);
int min_crop_width(const ArchConfig& config);

// Attention-map dump for one forward pass, in pipeline order.
struct ForwardProbe {
  std::vector<AttentionSite> sites;
  std::vector<Tensor> maps;       // gate map [h,w]
  std::vector<Tensor> pre_mean;   // channel mean of the SA input
  std::vector<Tensor> post_mean;  // channel mean of the SA output
};

struct ModelCache;

struct BatchForward {
  std::vector<Tensor> logits;  // per sample [T_s, K]
  std::vector<Tensor> probs;   // softmax rows of the above
  std::vector<int> frame_len;  // T_s from each sample's true width
  std::shared_ptr<ModelCache> cache;  // set when requested
};

// Crops are [input_height, W_i, 1]; they are right-padded with zeros to the
// widest crop internally, and per-sample true frame counts are derived from
// the true widths. Train mode uses batch statistics in BN and updates the
// running stats.
BatchForward model_forward_batch(Model& model, const std::vector<Tensor>& crops, Mode mode,
                                 bool want_cache);

// Single-crop forward: per-frame class distribution [T, K].
Tensor model_forward(Model& model, const Tensor& crop, Mode mode, ForwardProbe* probe = nullptr);

struct GradSet {
  std::vector<Tensor> tensors;  // aligned with model_params order
};

GradSet zero_grads(Model& model);
// grad_logits: one [T_s, K] tensor per sample from the loss. Returns the
// summed parameter gradients (caller scales).
GradSet model_backward(Model& model, ModelCache& cache, const std::vector<Tensor>& grad_logits);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace seqscript
