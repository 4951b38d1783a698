#include "seqscript/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "seqscript/pgm.hpp"

namespace seqscript {

AdamState make_adam(Model& model, double lr) {
  AdamState s;
  s.lr = lr;
  for (const ParamRef& p : model_params(model)) {
    s.m.emplace_back(p.tensor->shape, 0.0);
    s.v.emplace_back(p.tensor->shape, 0.0);
  }
  return s;
}

void adam_step(AdamState& state, const std::vector<ParamRef>& params, const GradSet& grads,
               double clip_norm) {
  if (params.size() != grads.tensors.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/moment count mismatch");

  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : grads.tensors[i].data) {
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads.tensors[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g.data[k] * scale;
      m.data[k] = state.beta1 * m.data[k] + (1.0 - state.beta1) * gk;
      v.data[k] = state.beta2 * v.data[k] + (1.0 - state.beta2) * gk * gk;
      const double mhat = m.data[k] / bc1;
      const double vhat = v.data[k] / bc2;
      p.data[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

CeResult cross_entropy_loss(const Tensor& logits, int script) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_loss: logits must be [T,K]");
  const int T = logits.shape[0], K = logits.shape[1];
  const int N = K - 1;
  if (script < 1 || script > N)
    throw ShapeError("cross_entropy_loss: script " + std::to_string(script) + " out of range");

  // per-frame softmax over scripts only (blank excluded), then time mean
  Tensor s({T, N}, 0.0);
  std::vector<double> pbar(static_cast<std::size_t>(N), 0.0);
  for (int t = 0; t < T; ++t) {
    double mx = logits(t, 1);
    for (int j = 2; j < K; ++j) mx = std::max(mx, logits(t, j));
    double sum = 0.0;
    for (int j = 0; j < N; ++j) {
      s(t, j) = std::exp(logits(t, j + 1) - mx);
      sum += s(t, j);
    }
    for (int j = 0; j < N; ++j) {
      s(t, j) /= sum;
      pbar[static_cast<std::size_t>(j)] += s(t, j) / T;
    }
  }
  const double py = pbar[static_cast<std::size_t>(script - 1)];
  CeResult res;
  res.nll = -std::log(std::max(py, 1e-300));
  res.grad_logits = Tensor({T, K}, 0.0);
  const double coef = -1.0 / (T * std::max(py, 1e-300));
  for (int t = 0; t < T; ++t) {
    const double sy = s(t, script - 1);
    for (int j = 0; j < N; ++j) {
      const double delta = j == script - 1 ? 1.0 : 0.0;
      res.grad_logits(t, j + 1) = coef * sy * (delta - s(t, j));
    }
  }
  return res;
}

LoadedDataset load_dataset(const DatasetManifest& manifest, int num_scripts) {
  LoadedDataset d;
  d.num_scripts = num_scripts;
  for (const ManifestEntry& e : manifest.entries) {
    d.images.push_back(read_pgm_file(manifest.root + "/" + e.file));
    d.scripts.push_back(e.script);
    d.labels.push_back(e.labels);
  }
  return d;
}

EvalReport evaluate(Model& model, const LoadedDataset& test_set) {
  const int N = model.config.num_scripts;
  if (test_set.num_scripts != N)
    throw ConfigError("model expects " + std::to_string(N) + " scripts, dataset has " +
                      std::to_string(test_set.num_scripts));
  EvalReport r;
  r.per_script_acc.assign(static_cast<std::size_t>(N), 0.0);
  r.confusion.assign(static_cast<std::size_t>(N), std::vector<long long>(static_cast<std::size_t>(N), 0));
  r.none_count.assign(static_cast<std::size_t>(N), 0);
  r.total = static_cast<long long>(test_set.size());

  std::vector<long long> truth_count(static_cast<std::size_t>(N), 0);
  long long frames = 0, blank_frames = 0, loss_samples = 0;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    Tensor probs = model_forward(model, test_set.images[i], Mode::eval);
    VoteResult vote = majority_vote(probs);
    const int truth = test_set.scripts[i];
    ++truth_count[static_cast<std::size_t>(truth - 1)];
    if (vote.script == 0)
      ++r.none_count[static_cast<std::size_t>(truth - 1)];
    else
      ++r.confusion[static_cast<std::size_t>(truth - 1)][static_cast<std::size_t>(vote.script - 1)];

    GreedyDecode dec = greedy_decode(probs);
    for (int cls : dec.path) {
      ++frames;
      blank_frames += cls == ClassAlphabet::blank ? 1 : 0;
    }
    if (min_frames_for(test_set.labels[i]) <= probs.shape[0]) {
      loss_sum += ctc_loss(probs, test_set.labels[i]).nll;
      ++loss_samples;
    }
  }

  long long correct = 0;
  for (int s = 0; s < N; ++s) {
    const long long diag = r.confusion[static_cast<std::size_t>(s)][static_cast<std::size_t>(s)];
    correct += diag;
    r.per_script_acc[static_cast<std::size_t>(s)] =
        truth_count[static_cast<std::size_t>(s)] > 0
            ? static_cast<double>(diag) / static_cast<double>(truth_count[static_cast<std::size_t>(s)])
            : 0.0;
  }
  r.word_acc = r.total > 0 ? static_cast<double>(correct) / static_cast<double>(r.total) : 0.0;
  r.mean_ctc_loss = loss_samples > 0 ? loss_sum / static_cast<double>(loss_samples) : 0.0;
  r.blank_rate = frames > 0 ? static_cast<double>(blank_frames) / static_cast<double>(frames) : 0.0;
  return r;
}

std::string eval_report_json(const EvalReport& report, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["word_acc"] = report.word_acc;
  j["total"] = report.total;
  j["mean_ctc_loss"] = report.mean_ctc_loss;
  j["blank_rate"] = report.blank_rate;
  nlohmann::json per;
  for (std::size_t s = 0; s < report.per_script_acc.size(); ++s)
    per[names.at(s)] = report.per_script_acc[s];
  j["per_script_acc"] = per;
  j["confusion"] = report.confusion;
  j["none_count"] = report.none_count;
  return j.dump();
}

TrainResult train(Model& model, const LoadedDataset& train_set, const LoadedDataset& test_set,
                  const TrainConfig& config) {
  const int N = model.config.num_scripts;
  if (train_set.num_scripts != N || (test_set.size() > 0 && test_set.num_scripts != N))
    throw ConfigError("model/dataset script count mismatch");
  if (config.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (train_set.size() == 0) throw ConfigError("empty training set");

  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path);
    if (!log) throw IoError("cannot open run log for writing: " + config.log_path);
  }

  AdamState adam = make_adam(model, config.lr);
  std::vector<ParamRef> params = model_params(model);
  const int n = static_cast<int>(train_set.size());
  TrainResult result;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    // seeded shuffle, independent of prior epochs
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng(config.seed).split(0xe90c000000000000ULL + static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double loss_sum = 0.0;
    long long used = 0, skipped = 0;
    for (int start = 0; start < n; start += config.batch_size) {
      const int bsz = std::min(config.batch_size, n - start);
      std::vector<Tensor> crops(static_cast<std::size_t>(bsz));
      std::vector<int> idx(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const int i = order[static_cast<std::size_t>(start + b)];
        idx[static_cast<std::size_t>(b)] = i;
        if (config.augment) {
          WordCrop crop;
          crop.image = train_set.images[static_cast<std::size_t>(i)];
          crop.labels = train_set.labels[static_cast<std::size_t>(i)];
          crop.script = train_set.scripts[static_cast<std::size_t>(i)];
          Rng arng = Rng(config.seed).split((static_cast<std::uint64_t>(epoch) << 32) ^
                                            static_cast<std::uint64_t>(i));
          crops[static_cast<std::size_t>(b)] = augment(crop, arng).image;
        } else {
          crops[static_cast<std::size_t>(b)] = train_set.images[static_cast<std::size_t>(i)];
        }
      }

      BatchForward fwd = model_forward_batch(model, crops, Mode::train, true);
      std::vector<Tensor> grad_logits(static_cast<std::size_t>(bsz));
      std::vector<int> contributing;
      double batch_loss = 0.0;
      for (int b = 0; b < bsz; ++b) {
        const int i = idx[static_cast<std::size_t>(b)];
        const Tensor& logits = fwd.logits[static_cast<std::size_t>(b)];
        const std::vector<int>& labels = train_set.labels[static_cast<std::size_t>(i)];
        if (config.loss == LossKind::ctc) {
          if (min_frames_for(labels) > logits.shape[0]) {
            ++skipped;  // too narrow for its label sequence; logged, not fatal
            grad_logits[static_cast<std::size_t>(b)] = Tensor(logits.shape, 0.0);
            continue;
          }
          CtcResult cr = ctc_loss(fwd.probs[static_cast<std::size_t>(b)], labels);
          batch_loss += cr.nll;
          grad_logits[static_cast<std::size_t>(b)] = std::move(cr.grad_logits);
        } else {
          CeResult ce = cross_entropy_loss(logits, train_set.scripts[static_cast<std::size_t>(i)]);
          batch_loss += ce.nll;
          grad_logits[static_cast<std::size_t>(b)] = std::move(ce.grad_logits);
        }
        contributing.push_back(b);
      }
      if (contributing.empty()) continue;

      // per-batch loss is the mean over contributing samples
      const double inv = 1.0 / static_cast<double>(contributing.size());
      for (Tensor& g : grad_logits)
        for (double& v : g.data) v *= inv;
      loss_sum += batch_loss;
      used += static_cast<long long>(contributing.size());

      GradSet grads = model_backward(model, *fwd.cache, grad_logits);
      adam_step(adam, params, grads, config.clip_norm);
      model.step = adam.t;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = used > 0 ? loss_sum / static_cast<double>(used) : 0.0;
    rec.skipped = skipped;
    if (test_set.size() > 0 && config.eval_every > 0 &&
        (epoch % config.eval_every == 0 || epoch == config.epochs)) {
      rec.evaluated = true;
      rec.eval = evaluate(model, test_set);
    }

    if (log.is_open()) {
      nlohmann::json j;
      j["epoch"] = rec.epoch;
      j["mean_loss"] = rec.mean_loss;
      j["skipped"] = rec.skipped;
      if (rec.evaluated) {
        j["word_acc"] = rec.eval.word_acc;
        j["per_script_acc"] = rec.eval.per_script_acc;
      } else {
        j["word_acc"] = nullptr;
        j["per_script_acc"] = nullptr;
      }
      log << j.dump() << '\n';
      log.flush();
    }
    if (config.progress) {
      std::fprintf(stderr, "epoch %d: loss %.4f%s%s\n", rec.epoch, rec.mean_loss,
                   rec.evaluated ? ", acc " : "",
                   rec.evaluated ? std::to_string(rec.eval.word_acc).c_str() : "");
    }
    result.log.push_back(std::move(rec));
  }
  result.steps = adam.t;
  return result;
}

}  // namespace seqscript
