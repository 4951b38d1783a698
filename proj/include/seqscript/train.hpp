#pragma once
#include <string>
#include <vector>

#include "seqscript/model.hpp"
#include "seqscript/synth.hpp"

namespace seqscript {

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;  // aligned with model_params order
  long long t = 0;
};

AdamState make_adam(Model& model, double lr = 0.001);

// Bias-corrected Adam update with global-norm gradient clipping applied
// before the moment updates. Throws NumericError naming the parameter on a
// non-finite gradient.
void adam_step(AdamState& state, const std::vector<ParamRef>& params, const GradSet& grads,
               double clip_norm);

// Cross-entropy baseline: per-frame softmax over the script classes with the
// blank logit excluded, mean-pooled over time, then CE against the word's
// single script label. Gradient is w.r.t. the full [T,K] logits (blank
// column zero).
struct CeResult {
  double nll = 0.0;
  Tensor grad_logits;
};

CeResult cross_entropy_loss(const Tensor& logits, int script);

struct EvalReport {
  double word_acc = 0.0;
  std::vector<double> per_script_acc;
  std::vector<std::vector<long long>> confusion;  // [truth][predicted], N x N
  std::vector<long long> none_count;              // all-blank predictions per truth script
  double mean_ctc_loss = 0.0;
  double blank_rate = 0.0;  // blank argmax frames / all frames
  long long total = 0;
};

struct LoadedDataset {
  int num_scripts = 0;
  std::vector<Tensor> images;
  std::vector<int> scripts;
  std::vector<std::vector<int>> labels;

  std::size_t size() const { return images.size(); }
};

LoadedDataset load_dataset(const DatasetManifest& manifest, int num_scripts);

struct TrainConfig {
  int batch_size = 32;
  int epochs = 10;
  LossKind loss = LossKind::ctc;
  bool augment = true;
  std::uint64_t seed = 0;
  double lr = 0.001;
  double clip_norm = 5.0;
  int eval_every = 1;
  std::string log_path;    // JSON-lines run log; empty = don't write
  bool progress = false;   // epoch summaries on stderr
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  long long skipped = 0;  // CTC-infeasible samples this epoch
  bool evaluated = false;
  EvalReport eval;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  long long steps = 0;
};

TrainResult train(Model& model, const LoadedDataset& train_set, const LoadedDataset& test_set,
                  const TrainConfig& config);

EvalReport evaluate(Model& model, const LoadedDataset& test_set);

std::string eval_report_json(const EvalReport& report, const std::vector<std::string>& names);

}  // namespace seqscript
