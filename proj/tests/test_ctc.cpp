#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "seqscript/ctc.hpp"
#include "seqscript/layers.hpp"
#include "support.hpp"

using namespace seqscript;

namespace {

// Exhaustive Eq-style oracle: sum the probability of every length-T path
// whose collapse equals the target. Exponential in T; test-only.
double enumerate_prob(const Tensor& probs, const std::vector<int>& labels) {
  const int T = probs.shape[0], K = probs.shape[1];
  double total = 0.0;
  std::vector<int> path(static_cast<std::size_t>(T), 0);
  const long long n = static_cast<long long>(std::pow(K, T));
  for (long long code = 0; code < n; ++code) {
    long long c = code;
    for (int t = 0; t < T; ++t) {
      path[static_cast<std::size_t>(t)] = static_cast<int>(c % K);
      c /= K;
    }
    if (collapse_beta(path, K) != labels) continue;
    double p = 1.0;
    for (int t = 0; t < T; ++t) p *= probs(t, path[static_cast<std::size_t>(t)]);
    total += p;
  }
  return total;
}

Tensor random_distribution(Rng& rng, int T, int K) {
  Tensor logits = testsup::random_tensor(rng, {T, K}, 1.5);
  return softmax(logits);
}

std::vector<int> random_feasible_labels(Rng& rng, int T, int K) {
  for (;;) {
    const int U = rng.uniform_int(1, std::min(T, 3));
    std::vector<int> l(static_cast<std::size_t>(U));
    for (int& v : l) v = rng.uniform_int(1, K - 1);
    if (min_frames_for(l) <= T) return l;
  }
}

}  // namespace

TEST_CASE("collapse_beta") {
  const int a = 1, b = 2, blank = 0;
  CHECK(collapse_beta({a, a, blank, a}, 3) == std::vector<int>{a, a});
  CHECK(collapse_beta({blank, blank, blank}, 3) == std::vector<int>{});
  CHECK(collapse_beta({a, b, b, blank, b}, 3) == std::vector<int>{a, b, b});
  CHECK_THROWS_AS(collapse_beta({5}, 3), ShapeError);

  // a collapsed sequence re-read as a path with blanks between repeats maps
  // to itself
  std::vector<int> l{1, 2, 2, 1};
  std::vector<int> as_path;
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (i > 0 && l[i] == l[i - 1]) as_path.push_back(blank);
    as_path.push_back(l[i]);
  }
  CHECK(collapse_beta(as_path, 3) == l);
}

TEST_CASE("min_frames_for counts repeats") {
  CHECK(min_frames_for({1}) == 1);
  CHECK(min_frames_for({1, 1}) == 3);
  CHECK(min_frames_for({1, 2, 2, 2}) == 6);
  CHECK(min_frames_for({}) == 0);
}

TEST_CASE("ctc_loss single frame") {
  Tensor y({1, 3}, 0.0);
  y(0, 0) = 0.2; y(0, 1) = 0.5; y(0, 2) = 0.3;
  CtcResult r = ctc_loss(y, {1});
  CHECK(r.nll == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("ctc_loss T=2 single label enumerates three paths") {
  Rng rng(7);
  Tensor y = random_distribution(rng, 2, 3);
  const int a = 1;
  const double want = y(0, a) * y(1, a) + y(0, a) * y(1, 0) + y(0, 0) * y(1, a);
  CtcResult r = ctc_loss(y, {a});
  CHECK(std::exp(-r.nll) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ctc_loss matches exhaustive enumeration") {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int T = rng.uniform_int(1, 6);
    const int K = rng.uniform_int(2, 4);
    Tensor y = random_distribution(rng, T, K);
    std::vector<int> l = random_feasible_labels(rng, T, K);
    const double want = enumerate_prob(y, l);
    CtcResult r = ctc_loss(y, l);
    CHECK(std::exp(-r.nll) == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("ctc gradient matches finite differences on logits") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const int T = rng.uniform_int(2, 5);
    const int K = rng.uniform_int(3, 4);
    Tensor logits = testsup::random_tensor(rng, {T, K}, 1.0);
    std::vector<int> l = random_feasible_labels(rng, T, K);
    CtcResult r = ctc_loss(softmax(logits), l);
    auto loss = [&] { return ctc_loss(softmax(logits), l).nll; };
    CHECK(testsup::gradcheck(logits, r.grad_logits, loss) < 1e-6);
  }
}

TEST_CASE("infeasible targets raise a dedicated error") {
  Tensor y({2, 3}, 1.0 / 3.0);
  CHECK_THROWS_AS(ctc_loss(y, {1, 1}), InfeasibleAlignmentError);  // needs 3 frames
  CHECK_THROWS_AS(ctc_loss(y, {1, 2, 1}), InfeasibleAlignmentError);
  CHECK_THROWS_AS(ctc_loss(y, {7}), ShapeError);
  CHECK_NOTHROW(ctc_loss(y, {1, 2}));
}

TEST_CASE("path probabilities partition into label-sequence masses") {
  Rng rng(17);
  const int T = 4, K = 3;
  Tensor y = random_distribution(rng, T, K);
  std::map<std::vector<int>, double> by_label;
  std::vector<int> path(T, 0);
  double total = 0.0;
  for (int code = 0; code < 81; ++code) {
    int c = code;
    for (int t = 0; t < T; ++t) {
      path[static_cast<std::size_t>(t)] = c % K;
      c /= K;
    }
    double p = 1.0;
    for (int t = 0; t < T; ++t) p *= y(t, path[static_cast<std::size_t>(t)]);
    by_label[collapse_beta(path, K)] += p;
    total += p;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  double feasible_sum = 0.0;
  for (const auto& [l, p] : by_label) {
    feasible_sum += p;
    if (l.empty()) continue;
    CtcResult r = ctc_loss(y, l);
    CHECK(std::exp(-r.nll) == doctest::Approx(p).epsilon(1e-10));
  }
  CHECK(feasible_sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("greedy decode") {
  // one-hot frames a, a, blank, b
  Tensor y({4, 3}, 0.0);
  y(0, 1) = 1; y(1, 1) = 1; y(2, 0) = 1; y(3, 2) = 1;
  GreedyDecode d = greedy_decode(y);
  CHECK(d.path == std::vector<int>{1, 1, 0, 2});
  CHECK(d.collapsed == std::vector<int>{1, 2});

  Tensor blanks({3, 3}, 0.0);
  for (int t = 0; t < 3; ++t) blanks(t, 0) = 1.0;
  CHECK(greedy_decode(blanks).collapsed.empty());

  // uniform rows tie to the lowest index, which is the blank
  Tensor uniform({3, 4}, 0.25);
  GreedyDecode du = greedy_decode(uniform);
  CHECK(du.path == std::vector<int>{0, 0, 0});
  CHECK(du.collapsed.empty());
}

TEST_CASE("frame duplication never changes the greedy decode") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const int T = rng.uniform_int(1, 6), K = rng.uniform_int(2, 4);
    Tensor y = random_distribution(rng, T, K);
    Tensor y2({2 * T, K}, 0.0);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < K; ++k) {
        y2(2 * t, k) = y(t, k);
        y2(2 * t + 1, k) = y(t, k);
      }
    CHECK(greedy_decode(y).collapsed == greedy_decode(y2).collapsed);
  }
}

TEST_CASE("majority vote") {
  // frames argmax: a, a, b, blank
  Tensor y({4, 3}, 0.0);
  y(0, 1) = 0.9; y(0, 2) = 0.05; y(0, 0) = 0.05;
  y(1, 1) = 0.8; y(1, 2) = 0.1; y(1, 0) = 0.1;
  y(2, 2) = 0.7; y(2, 1) = 0.2; y(2, 0) = 0.1;
  y(3, 0) = 0.6; y(3, 1) = 0.2; y(3, 2) = 0.2;
  VoteResult v = majority_vote(y);
  CHECK(v.script == 1);
  CHECK(v.counts == std::vector<int>{2, 1});

  Tensor blanks({3, 3}, 0.0);
  for (int t = 0; t < 3; ++t) blanks(t, 0) = 1.0;
  VoteResult vb = majority_vote(blanks);
  CHECK(vb.script == 0);
  CHECK(vb.counts == std::vector<int>{0, 0});
}

TEST_CASE("majority vote ties break by probability mass then index") {
  // counts tied 2:2; script 1 holds more total mass (1.4 vs 1.1)
  Tensor y({4, 3}, 0.0);
  y(0, 1) = 0.45; y(0, 2) = 0.15; y(0, 0) = 0.40;
  y(1, 1) = 0.45; y(1, 2) = 0.15; y(1, 0) = 0.40;
  y(2, 2) = 0.40; y(2, 1) = 0.25; y(2, 0) = 0.35;
  y(3, 2) = 0.40; y(3, 1) = 0.25; y(3, 0) = 0.35;
  double mass1 = 0, mass2 = 0;
  for (int t = 0; t < 4; ++t) {
    mass1 += y(t, 1);
    mass2 += y(t, 2);
  }
  CHECK(mass1 == doctest::Approx(1.4));
  CHECK(mass2 == doctest::Approx(1.1));
  VoteResult v = majority_vote(y);
  CHECK(v.counts == std::vector<int>{2, 2});
  CHECK(v.script == 1);

  // exactly equal masses fall back to the lowest index
  Tensor z({2, 3}, 0.0);
  z(0, 1) = 0.6; z(0, 2) = 0.3; z(0, 0) = 0.1;
  z(1, 2) = 0.6; z(1, 1) = 0.3; z(1, 0) = 0.1;
  VoteResult vz = majority_vote(z);
  CHECK(vz.counts == std::vector<int>{1, 1});
  CHECK(vz.script == 1);
}

TEST_CASE("majority vote is invariant under frame permutation") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const int T = rng.uniform_int(2, 8), K = rng.uniform_int(2, 5);
    Tensor y = random_distribution(rng, T, K);
    std::vector<int> perm(static_cast<std::size_t>(T));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = T - 1; i > 0; --i)
      std::swap(perm[static_cast<std::size_t>(i)],
                perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    Tensor yp({T, K}, 0.0);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < K; ++k) yp(t, k) = y(perm[static_cast<std::size_t>(t)], k);
    VoteResult v1 = majority_vote(y);
    VoteResult v2 = majority_vote(yp);
    CHECK(v1.script == v2.script);
    CHECK(v1.counts == v2.counts);
  }
}
