#include "seqscript/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace seqscript {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-(std::abs(a - b))));
}

}  // namespace

std::vector<int> collapse_beta(const std::vector<int>& path, int num_classes) {
  std::vector<int> out;
  int prev = -1;
  for (int idx : path) {
    if (idx < 0 || idx >= num_classes)
      throw ShapeError("collapse_beta: class index " + std::to_string(idx) + " out of range");
    if (idx != prev && idx != ClassAlphabet::blank) out.push_back(idx);
    prev = idx;
  }
  return out;
}

int min_frames_for(const std::vector<int>& labels) {
  int repeats = 0;
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++repeats;
  return static_cast<int>(labels.size()) + repeats;
}

CtcResult ctc_loss(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw ShapeError("ctc_loss: probs must be [T, K]");
  const int T = probs.shape[0], K = probs.shape[1];
  if (T < 1) throw ShapeError("ctc_loss: T must be >= 1");
  for (int l : labels)
    if (l < 1 || l >= K)
      throw ShapeError("ctc_loss: label " + std::to_string(l) + " out of range [1," +
                       std::to_string(K - 1) + "]");
  if (T < min_frames_for(labels))
    throw InfeasibleAlignmentError("ctc_loss: " + std::to_string(T) +
                                   " frames cannot carry a label sequence needing " +
                                   std::to_string(min_frames_for(labels)));

  // Augmented sequence: blank, l1, blank, l2, ..., blank.
  const int U = static_cast<int>(labels.size());
  const int S = 2 * U + 1;
  std::vector<int> aug(static_cast<std::size_t>(S), ClassAlphabet::blank);
  for (int u = 0; u < U; ++u) aug[static_cast<std::size_t>(2 * u + 1)] = labels[static_cast<std::size_t>(u)];

  std::vector<double> logp(static_cast<std::size_t>(T) * K);
  for (std::size_t i = 0; i < logp.size(); ++i)
    logp[i] = probs.data[i] > 0.0 ? std::log(probs.data[i]) : kNegInf;
  const auto lp = [&](int t, int k) { return logp[static_cast<std::size_t>(t) * K + k]; };

  std::vector<double> alpha(static_cast<std::size_t>(T) * S, kNegInf);
  std::vector<double> beta(static_cast<std::size_t>(T) * S, kNegInf);
  const auto a = [&](int t, int s) -> double& { return alpha[static_cast<std::size_t>(t) * S + s]; };
  const auto bt = [&](int t, int s) -> double& { return beta[static_cast<std::size_t>(t) * S + s]; };

  a(0, 0) = lp(0, aug[0]);
  if (S > 1) a(0, 1) = lp(0, aug[1]);
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < S; ++s) {
      double v = a(t - 1, s);
      if (s >= 1) v = log_add(v, a(t - 1, s - 1));
      if (s >= 2 && aug[static_cast<std::size_t>(s)] != ClassAlphabet::blank &&
          aug[static_cast<std::size_t>(s)] != aug[static_cast<std::size_t>(s - 2)])
        v = log_add(v, a(t - 1, s - 2));
      a(t, s) = v + lp(t, aug[static_cast<std::size_t>(s)]);
    }
  }

  bt(T - 1, S - 1) = lp(T - 1, aug[static_cast<std::size_t>(S - 1)]);
  if (S > 1) bt(T - 1, S - 2) = lp(T - 1, aug[static_cast<std::size_t>(S - 2)]);
  for (int t = T - 2; t >= 0; --t) {
    for (int s = S - 1; s >= 0; --s) {
      double v = bt(t + 1, s);
      if (s + 1 < S) v = log_add(v, bt(t + 1, s + 1));
      if (s + 2 < S && aug[static_cast<std::size_t>(s)] != ClassAlphabet::blank &&
          aug[static_cast<std::size_t>(s)] != aug[static_cast<std::size_t>(s + 2)])
        v = log_add(v, bt(t + 1, s + 2));
      bt(t, s) = v + lp(t, aug[static_cast<std::size_t>(s)]);
    }
  }

  double log_total = a(T - 1, S - 1);
  if (S > 1) log_total = log_add(log_total, a(T - 1, S - 2));
  if (log_total == kNegInf)
    throw NumericError("ctc_loss: zero total path probability for a feasible target");

  CtcResult res;
  res.nll = -log_total;
  res.grad_logits = Tensor({T, K}, 0.0);
  // grad wrt logits z: y - posterior, posterior_{t,k} =
  //   sum_{s: aug_s = k} alpha_t(s) beta_t(s) / (p(l|y) * y_t(k))
  // where alpha and beta both absorb the frame factor, hence one division.
  for (int t = 0; t < T; ++t) {
    std::vector<double> log_ab(static_cast<std::size_t>(K), kNegInf);
    for (int s = 0; s < S; ++s) {
      const int k = aug[static_cast<std::size_t>(s)];
      log_ab[static_cast<std::size_t>(k)] =
          log_add(log_ab[static_cast<std::size_t>(k)], a(t, s) + bt(t, s));
    }
    for (int k = 0; k < K; ++k) {
      const double y = probs(t, k);
      double posterior = 0.0;
      if (log_ab[static_cast<std::size_t>(k)] != kNegInf)
        posterior = std::exp(log_ab[static_cast<std::size_t>(k)] - log_total - lp(t, k));
      res.grad_logits(t, k) = y - posterior;
    }
  }
  return res;
}

GreedyDecode greedy_decode(const Tensor& probs) {
  if (probs.rank() != 2) throw ShapeError("greedy_decode: probs must be [T, K]");
  const int T = probs.shape[0], K = probs.shape[1];
  GreedyDecode out;
  out.path.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (probs(t, k) > probs(t, best)) best = k;
    out.path[static_cast<std::size_t>(t)] = best;
  }
  out.collapsed = collapse_beta(out.path, K);
  return out;
}

VoteResult majority_vote(const Tensor& probs) {
  if (probs.rank() != 2) throw ShapeError("majority_vote: probs must be [T, K]");
  const int T = probs.shape[0], K = probs.shape[1];
  VoteResult res;
  res.counts.assign(static_cast<std::size_t>(K - 1), 0);
  for (int t = 0; t < T; ++t) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (probs(t, k) > probs(t, best)) best = k;
    if (best != ClassAlphabet::blank) ++res.counts[static_cast<std::size_t>(best - 1)];
  }
  int best_script = 0;
  int best_count = 0;
  double best_mass = 0.0;
  for (int s = 1; s < K; ++s) {
    const int count = res.counts[static_cast<std::size_t>(s - 1)];
    if (count == 0) continue;
    double mass = 0.0;
    for (int t = 0; t < T; ++t) mass += probs(t, s);
    if (count > best_count || (count == best_count && mass > best_mass)) {
      best_script = s;
      best_count = count;
      best_mass = mass;
    }
  }
  res.script = best_script;
  return res;
}

}  // namespace seqscript
