#pragma once
#include <string>
#include <vector>

#include "seqscript/tensor.hpp"

namespace seqscript {

// Class index 0 is always the blank; scripts occupy 1..N.
struct ClassAlphabet {
  std::vector<std::string> scripts;
  static constexpr int blank = 0;

  int num_classes() const { return static_cast<int>(scripts.size()) + 1; }
  const std::string& script_name(int index) const { return scripts[static_cast<std::size_t>(index - 1)]; }
};

// Collapse mapping: merge adjacent repeats, then delete blanks.
std::vector<int> collapse_beta(const std::vector<int>& path, int num_classes);

// Smallest T that can carry the label sequence: one frame per label plus a
// separating blank between equal neighbours.
int min_frames_for(const std::vector<int>& labels);

struct CtcResult {
  double nll = 0.0;
  Tensor grad_logits;  // [T, num_classes], gradient w.r.t. pre-softmax logits
};

// Negative log-likelihood of the label sequence under per-frame
// distributions probs [T, K], summed over all collapsing paths; computed in
// log space with the forward-backward recursions (Graves et al., ICML 2006).
// probs must come from a softmax: the returned gradient is the fused
// softmax+loss form y - posterior.
CtcResult ctc_loss(const Tensor& probs, const std::vector<int>& labels);

struct GreedyDecode {
  std::vector<int> path;       // per-frame argmax, ties to the lowest index
  std::vector<int> collapsed;  // collapse_beta(path)
};

GreedyDecode greedy_decode(const Tensor& probs);

struct VoteResult {
  int script = 0;           // winning script index in 1..N, or 0 for none
  std::vector<int> counts;  // counts[s-1] = frames whose argmax was script s
};

// Word-level decision: count per-frame argmax occurrences per script (blank
// frames excluded). Ties break by total probability mass over all frames,
// then by lowest index. All-blank input yields script = 0.
VoteResult majority_vote(const Tensor& probs);

}  // namespace seqscript
