#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "seqscript/residue.hpp"
#include "support.hpp"

using namespace seqscript;
using testsup::gradcheck;
using testsup::random_tensor;
using testsup::weighted_sum;

TEST_CASE("zero residual with matching channels is the identity") {
  ResidueBlock b = make_residue_block(3, 4, 3);
  CHECK(!b.skip_proj.has_value());
  Rng rng(23);
  Tensor x = random_tensor(rng, {5, 6, 3});
  ResBlockCache cache;
  Tensor out = resblock_forward(b, x, &cache);
  CHECK(testsup::max_abs_diff(out, x) == 0.0);  // bit-exact

  // backward passes grad_out through unchanged (relu'(0) = 0 kills the conv path)
  Tensor go = random_tensor(rng, {5, 6, 3});
  ResBlockGrads g = resblock_backward(b, cache, go);
  CHECK(testsup::max_abs_diff(g.input, go) == 0.0);
}

TEST_CASE("channel mismatch uses a 1x1 projection skip") {
  ResidueBlock b = make_residue_block(2, 3, 4);
  REQUIRE(b.skip_proj.has_value());
  CHECK(b.skip_proj->c_in() == 2);
  CHECK(b.skip_proj->c_out() == 4);

  // zero residual path: output equals the projected input
  Rng rng(29);
  b.skip_proj->weights = random_tensor(rng, {1, 1, 2, 4});
  Tensor x = random_tensor(rng, {4, 4, 2});
  Tensor out = resblock_forward(b, x);
  Tensor want = conv2d_forward(*b.skip_proj, x);
  CHECK(testsup::max_abs_diff(out, want) == 0.0);
}

TEST_CASE("forward matches a composition of oracles") {
  Rng rng(31);
  ResidueBlock b = make_residue_block(2, 3, 2);
  b.conv_a.weights = random_tensor(rng, {3, 3, 2, 3}, 0.5);
  b.conv_a.bias = random_tensor(rng, {3}, 0.5);
  b.conv_b.weights = random_tensor(rng, {3, 3, 3, 2}, 0.5);
  b.conv_b.bias = random_tensor(rng, {2}, 0.5);
  Tensor x = random_tensor(rng, {4, 5, 2});
  Tensor got = resblock_forward(b, x);

  Tensor h1 = relu(testsup::conv_oracle(x, b.conv_a.weights, b.conv_a.bias, 1));
  Tensor h2 = relu(testsup::conv_oracle(h1, b.conv_b.weights, b.conv_b.bias, 1));
  Tensor want = add(h2, x);
  CHECK(testsup::max_rel_diff(got, want, 1.0) < 1e-12);
}

TEST_CASE("spatial shape is always preserved") {
  Rng rng(37);
  ResidueBlock b = make_residue_block(2, 5, 7);
  Tensor x = random_tensor(rng, {9, 3, 2});
  Tensor out = resblock_forward(b, x);
  CHECK(out.shape == std::vector<int>{9, 3, 7});
}

TEST_CASE("backward finite differences with projection skip") {
  Rng rng(41);
  ResidueBlock b = make_residue_block(2, 2, 3);
  b.conv_a.weights = random_tensor(rng, {3, 3, 2, 2}, 0.5);
  b.conv_a.bias = random_tensor(rng, {2}, 0.5);
  b.conv_b.weights = random_tensor(rng, {3, 3, 2, 3}, 0.5);
  b.conv_b.bias = random_tensor(rng, {3}, 0.5);
  b.skip_proj->weights = random_tensor(rng, {1, 1, 2, 3}, 0.5);
  b.skip_proj->bias = random_tensor(rng, {3}, 0.5);
  Tensor x = random_tensor(rng, {4, 4, 2});
  Tensor go = random_tensor(rng, {4, 4, 3});

  ResBlockCache cache;
  resblock_forward(b, x, &cache);
  ResBlockGrads g = resblock_backward(b, cache, go);

  auto loss = [&] { return weighted_sum(resblock_forward(b, x), go); };
  CHECK(gradcheck(x, g.input, loss) < 1e-5);
  CHECK(gradcheck(b.conv_a.weights, g.conv_a_weights, loss) < 1e-5);
  CHECK(gradcheck(b.conv_a.bias, g.conv_a_bias, loss) < 1e-5);
  CHECK(gradcheck(b.conv_b.weights, g.conv_b_weights, loss) < 1e-5);
  CHECK(gradcheck(b.conv_b.bias, g.conv_b_bias, loss) < 1e-5);
  CHECK(gradcheck(b.skip_proj->weights, g.skip_weights, loss) < 1e-5);
  CHECK(gradcheck(b.skip_proj->bias, g.skip_bias, loss) < 1e-5);

  Tensor gz({4, 4, 3}, 0.0);
  ResBlockGrads zero = resblock_backward(b, cache, gz);
  for (double v : zero.input.data) CHECK(v == 0.0);
  for (double v : zero.conv_a_weights.data) CHECK(v == 0.0);
  for (double v : zero.skip_weights.data) CHECK(v == 0.0);

  ResBlockCache empty;
  CHECK_THROWS_AS(resblock_backward(b, empty, go), InternalError);
}

TEST_CASE("use_skip=false degrades to a plain conv chain") {
  Rng rng(43);
  ResidueBlock plain = make_residue_block(2, 3, 2, /*use_skip=*/false);
  CHECK(!plain.skip_proj.has_value());
  plain.conv_a.weights = random_tensor(rng, {3, 3, 2, 3}, 0.5);
  plain.conv_b.weights = random_tensor(rng, {3, 3, 3, 2}, 0.5);
  Tensor x = random_tensor(rng, {4, 4, 2});
  Tensor got = resblock_forward(plain, x);
  Tensor want = relu(conv2d_forward(plain.conv_b, relu(conv2d_forward(plain.conv_a, x))));
  CHECK(testsup::max_abs_diff(got, want) == 0.0);

  Tensor go = random_tensor(rng, {4, 4, 2});
  ResBlockCache cache;
  resblock_forward(plain, x, &cache);
  ResBlockGrads g = resblock_backward(plain, cache, go);
  auto loss = [&] { return weighted_sum(resblock_forward(plain, x), go); };
  CHECK(gradcheck(x, g.input, loss) < 1e-5);
}
