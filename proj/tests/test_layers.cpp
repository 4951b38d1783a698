#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "seqscript/layers.hpp"
#include "support.hpp"

using namespace seqscript;
using testsup::gradcheck;
using testsup::random_tensor;
using testsup::weighted_sum;

TEST_CASE("conv identity kernel is the identity map") {
  Rng rng(11);
  ConvLayer l = make_conv3x3(3, 3);
  for (int c = 0; c < 3; ++c) l.weights(1, 1, c, c) = 1.0;
  Tensor in = random_tensor(rng, {5, 6, 3});
  Tensor out = conv2d_forward(l, in);
  CHECK(testsup::max_abs_diff(out, in) == 0.0);
}

TEST_CASE("conv padded sum counts") {
  ConvLayer l = make_conv3x3(1, 1);
  for (double& v : l.weights.data) v = 1.0;
  Tensor in({3, 3, 1}, 1.0);
  Tensor out = conv2d_forward(l, in);
  CHECK(out(1, 1, 0) == doctest::Approx(9.0));
  CHECK(out(0, 0, 0) == doctest::Approx(4.0));
  CHECK(out(0, 2, 0) == doctest::Approx(4.0));
  CHECK(out(2, 0, 0) == doctest::Approx(4.0));
  CHECK(out(2, 2, 0) == doctest::Approx(4.0));
  CHECK(out(0, 1, 0) == doctest::Approx(6.0));
}

TEST_CASE("conv forward matches six-loop oracle") {
  Rng rng(21);
  ConvLayer l = make_conv3x3(2, 3);
  l.weights = random_tensor(rng, {3, 3, 2, 3});
  l.bias = random_tensor(rng, {3});
  Tensor in = random_tensor(rng, {5, 4, 2});
  Tensor got = conv2d_forward(l, in);
  Tensor want = testsup::conv_oracle(in, l.weights, l.bias, 1);
  CHECK(testsup::max_rel_diff(got, want, 1.0) < 1e-12);

  ConvLayer p = make_conv1x1(2, 4);
  p.weights = random_tensor(rng, {1, 1, 2, 4});
  p.bias = random_tensor(rng, {4});
  Tensor got1 = conv2d_forward(p, in);
  Tensor want1 = testsup::conv_oracle(in, p.weights, p.bias, 0);
  CHECK(testsup::max_rel_diff(got1, want1, 1.0) < 1e-12);

  Tensor wrong({4, 4, 5}, 0.0);
  CHECK_THROWS_AS(conv2d_forward(l, wrong), ShapeError);
}

TEST_CASE("conv backward: zero grad, bias identity, finite differences") {
  Rng rng(31);
  ConvLayer l = make_conv3x3(2, 2);
  l.weights = random_tensor(rng, {3, 3, 2, 2}, 0.5);
  l.bias = random_tensor(rng, {2}, 0.5);
  Tensor in = random_tensor(rng, {4, 4, 2});

  Tensor gz({4, 4, 2}, 0.0);
  ConvGrads zero = conv2d_backward(l, in, gz);
  for (double v : zero.input.data) CHECK(v == 0.0);
  for (double v : zero.weights.data) CHECK(v == 0.0);
  for (double v : zero.bias.data) CHECK(v == 0.0);

  Tensor go = random_tensor(rng, {4, 4, 2});
  ConvGrads g = conv2d_backward(l, in, go);

  // grad_bias is the per-output-channel sum of grad_out
  for (int o = 0; o < 2; ++o) {
    double acc = 0.0;
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) acc += go(h, w, o);
    CHECK(g.bias(o) == doctest::Approx(acc).epsilon(1e-12));
  }

  auto loss = [&] { return weighted_sum(conv2d_forward(l, in), go); };
  CHECK(gradcheck(in, g.input, loss) < 1e-6);
  CHECK(gradcheck(l.weights, g.weights, loss) < 1e-6);
  CHECK(gradcheck(l.bias, g.bias, loss) < 1e-6);
}

TEST_CASE("maxpool forward basics") {
  Tensor in({2, 2, 1}, 0.0);
  in(0, 0, 0) = 1; in(0, 1, 0) = 2; in(1, 0, 0) = 3; in(1, 1, 0) = 4;
  MaxPoolResult r = maxpool_forward({2, 2, 2, 2}, in);
  CHECK(r.output.shape == std::vector<int>{1, 1, 1});
  CHECK(r.output(0, 0, 0) == 4.0);

  // constant input: ties go to the first element of each window
  Tensor flat({4, 4, 2}, 7.0);
  MaxPoolResult rc = maxpool_forward({2, 2, 2, 2}, flat);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 2; ++c) {
        const int expect = ((y * 2) * 4 + (x * 2)) * 2 + c;
        CHECK(rc.argmax[static_cast<std::size_t>((y * 2 + x) * 2 + c)] == expect);
      }

  CHECK_THROWS_AS(maxpool_forward({5, 5, 5, 5}, in), ShapeError);
}

TEST_CASE("maxpool 2x1 window reduces only the height") {
  Rng rng(41);
  Tensor in = random_tensor(rng, {4, 3, 1});
  MaxPoolResult r = maxpool_forward({2, 1, 2, 1}, in);
  CHECK(r.output.shape == std::vector<int>{2, 3, 1});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x)
      CHECK(r.output(y, x, 0) == doctest::Approx(std::max(in(2 * y, x, 0), in(2 * y + 1, x, 0))));
}

TEST_CASE("maxpool backward routes gradient to the argmax only") {
  Tensor in({2, 2, 1}, 0.0);
  in(0, 0, 0) = 1; in(0, 1, 0) = 5; in(1, 0, 0) = 3; in(1, 1, 0) = 4;
  MaxPoolResult r = maxpool_forward({2, 2, 2, 2}, in);
  Tensor go({1, 1, 1}, 2.5);
  Tensor gi = maxpool_backward(r, go);
  CHECK(gi(0, 1, 0) == 2.5);
  CHECK(gi(0, 0, 0) == 0.0);
  CHECK(gi(1, 0, 0) == 0.0);
  CHECK(gi(1, 1, 0) == 0.0);
}

TEST_CASE("maxpool backward finite differences at distinct values") {
  Rng rng(51);
  Tensor in = random_tensor(rng, {4, 4, 2});  // continuous draws: windows distinct
  MaxPoolSpec spec{2, 2, 2, 2};
  Tensor go = random_tensor(rng, {2, 2, 2});
  MaxPoolResult r = maxpool_forward(spec, in);
  Tensor gi = maxpool_backward(r, go);
  auto loss = [&] { return weighted_sum(maxpool_forward(spec, in).output, go); };
  CHECK(gradcheck(in, gi, loss) < 1e-6);
}

TEST_CASE("batchnorm forward statistics") {
  Rng rng(61);
  BatchNormLayer bn = make_batchnorm(3);
  Tensor batch = random_tensor(rng, {4, 2, 2, 3}, 2.0);
  BatchNormCache cache;
  Tensor out = batchnorm_forward(bn, batch, Mode::train, &cache);

  const int rows = 4 * 2 * 2;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int r = 0; r < rows; ++r) mean += out.data[static_cast<std::size_t>(r * 3 + c)];
    mean /= rows;
    for (int r = 0; r < rows; ++r) {
      const double d = out.data[static_cast<std::size_t>(r * 3 + c)] - mean;
      var += d * d;
    }
    var /= rows;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-3);  // 1/(1 + eps/sigma^2) shrink
  }

  // gamma = 0 collapses the output onto beta
  BatchNormLayer bn0 = make_batchnorm(3);
  for (int c = 0; c < 3; ++c) {
    bn0.gamma(c) = 0.0;
    bn0.beta(c) = 1.5;
  }
  Tensor out0 = batchnorm_forward(bn0, batch, Mode::train);
  for (double v : out0.data) CHECK(v == doctest::Approx(1.5));

  // already-normalized input passes through (up to epsilon)
  BatchNormLayer bn1 = make_batchnorm(3);
  Tensor out1 = batchnorm_forward(bn1, out, Mode::train);
  CHECK(testsup::max_abs_diff(out1, out) < 1e-4);

  Tensor tiny({1, 1, 1, 3}, 0.0);
  CHECK_THROWS_AS(batchnorm_forward(bn, tiny, Mode::train), ShapeError);
}

TEST_CASE("batchnorm eval uses running statistics") {
  Rng rng(62);
  BatchNormLayer bn = make_batchnorm(2);
  Tensor batch = random_tensor(rng, {2, 2, 2, 2}, 1.0);
  for (int i = 0; i < 50; ++i) batchnorm_forward(bn, batch, Mode::train);
  Tensor eval_out = batchnorm_forward(bn, batch, Mode::eval);
  Tensor train_out = batchnorm_forward(bn, batch, Mode::train);
  // after many updates the running stats approach the batch stats
  CHECK(testsup::max_abs_diff(eval_out, train_out) < 0.05);
}

TEST_CASE("batchnorm backward") {
  Rng rng(63);
  BatchNormLayer bn = make_batchnorm(3);
  bn.gamma = random_tensor(rng, {3}, 1.0);
  bn.beta = random_tensor(rng, {3}, 1.0);
  Tensor batch = random_tensor(rng, {4, 2, 2, 3}, 2.0);
  Tensor go = random_tensor(rng, {4, 2, 2, 3});
  BatchNormCache cache;
  batchnorm_forward(bn, batch, Mode::train, &cache);
  BatchNormGrads g = batchnorm_backward(bn, cache, go);

  // grad_beta is the per-channel sum of grad_out
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (int r = 0; r < 16; ++r) acc += go.data[static_cast<std::size_t>(r * 3 + c)];
    CHECK(g.beta(c) == doctest::Approx(acc).epsilon(1e-12));
  }

  auto loss = [&] {
    BatchNormLayer fresh = bn;  // keep running stats fixed during probing
    return weighted_sum(batchnorm_forward(fresh, batch, Mode::train), go);
  };
  CHECK(gradcheck(batch, g.input, loss) < 1e-5);
  CHECK(gradcheck(bn.gamma, g.gamma, loss) < 1e-5);
  CHECK(gradcheck(bn.beta, g.beta, loss) < 1e-5);

  // constant grad_out with gamma=1: normalization removes the mean shift
  BatchNormLayer bn1 = make_batchnorm(3);
  BatchNormCache c1;
  batchnorm_forward(bn1, batch, Mode::train, &c1);
  Tensor ones({4, 2, 2, 3}, 1.0);
  BatchNormGrads g1 = batchnorm_backward(bn1, c1, ones);
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (int r = 0; r < 16; ++r) acc += g1.input.data[static_cast<std::size_t>(r * 3 + c)];
    CHECK(std::abs(acc) < 1e-10);
  }

  BatchNormCache empty;
  CHECK_THROWS_AS(batchnorm_backward(bn, empty, go), InternalError);
}

TEST_CASE("activations") {
  Tensor x({3}, 0.0);
  x(0) = -1; x(1) = 0; x(2) = 2;
  Tensor r = relu(x);
  CHECK(r(0) == 0.0);
  CHECK(r(1) == 0.0);
  CHECK(r(2) == 2.0);

  Tensor s = sigmoid(Tensor({1}, 0.0));
  CHECK(s(0) == doctest::Approx(0.5));
  // stable in the tails
  Tensor t({2}, 0.0);
  t(0) = 800; t(1) = -800;
  Tensor st = sigmoid(t);
  CHECK(st(0) == doctest::Approx(1.0));
  CHECK(st(1) == doctest::Approx(0.0));
  check_finite(st, "sigmoid tails");

  Tensor big({1, 2}, 1000.0);
  Tensor sm = softmax(big);
  CHECK(sm(0, 0) == doctest::Approx(0.5));
  CHECK(sm(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(71);
  Tensor x = random_tensor(rng, {6, 5}, 30.0);
  Tensor s = softmax(x);
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 5; ++c) {
      CHECK(s(r, c) >= 0.0);
      CHECK(s(r, c) <= 1.0);
      sum += s(r, c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("activation backward passes finite differences") {
  Rng rng(81);
  Tensor x = random_tensor(rng, {4, 3});
  Tensor go = random_tensor(rng, {4, 3});

  Tensor gr = relu_backward(x, go);
  auto loss_r = [&] { return weighted_sum(relu(x), go); };
  CHECK(gradcheck(x, gr, loss_r) < 1e-6);

  Tensor act = sigmoid(x);
  Tensor gs = sigmoid_backward(act, go);
  auto loss_s = [&] { return weighted_sum(sigmoid(x), go); };
  CHECK(gradcheck(x, gs, loss_s) < 1e-6);

  Tensor sm = softmax(x);
  Tensor gm = softmax_backward(sm, go);
  auto loss_m = [&] { return weighted_sum(softmax(x), go); };
  CHECK(gradcheck(x, gm, loss_m) < 1e-6);
}

TEST_CASE("fc forward and backward") {
  FcLayer eye = make_fc(3, 3);
  for (int i = 0; i < 3; ++i) eye.weights(i, i) = 1.0;
  Tensor v({3}, 0.0);
  v(0) = 1; v(1) = -2; v(2) = 0.5;
  Tensor out = fc_forward(eye, v);
  CHECK(testsup::max_abs_diff(out, v) == 0.0);

  Rng rng(91);
  FcLayer l = make_fc(6, 4);
  l.weights = random_tensor(rng, {6, 4});
  l.bias = random_tensor(rng, {4});
  Tensor x = random_tensor(rng, {6});
  Tensor go = random_tensor(rng, {4});
  FcGrads g = fc_backward(l, x, go);
  CHECK(testsup::max_abs_diff(g.bias, go) == 0.0);  // single row: grad_bias = grad_out

  auto loss = [&] { return weighted_sum(fc_forward(l, x), go); };
  CHECK(gradcheck(x, g.input, loss) < 1e-8);
  CHECK(gradcheck(l.weights, g.weights, loss) < 1e-8);
  CHECK(gradcheck(l.bias, g.bias, loss) < 1e-8);

  // row-batched form
  Tensor xb = random_tensor(rng, {5, 6});
  Tensor gob = random_tensor(rng, {5, 4});
  FcGrads gb = fc_backward(l, xb, gob);
  auto loss_b = [&] { return weighted_sum(fc_forward(l, xb), gob); };
  CHECK(gradcheck(xb, gb.input, loss_b) < 1e-8);
  CHECK(gradcheck(l.weights, gb.weights, loss_b) < 1e-8);

  CHECK_THROWS_AS(fc_forward(l, Tensor({5}, 0.0)), ShapeError);
}
