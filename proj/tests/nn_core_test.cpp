// Copyright 2026 The CUPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cupe/gradcheck.hpp"
#include "cupe/layers.hpp"
#include "cupe/ops.hpp"

using namespace cupe;
using namespace cupe::nn;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// sum(weights * y) turns any op into a scalar with generic gradients.
Var weighted_sum(Var y, const Tensor& weights) {
  return sum(mul(y, y.tape().constant(weights)));
}

}  // namespace

TEST(Conv1d, OutputLengthsMatchFeatureStages) {
  EXPECT_EQ(conv_out_length(1920, 15, {7, 7, 1}), 275u);
  EXPECT_EQ(conv_out_length(275, 11, {5, 5, 1}), 55u);
  EXPECT_EQ(conv_out_length(55, 7, {3, 3, 1}), 19u);
  EXPECT_EQ(conv_out_length(19, 5, {2, 2, 1}), 10u);
}

TEST(Conv1d, ZeroInputYieldsBias) {
  Tape tape;
  Var x = tape.constant(Tensor({2, 3, 12}));
  std::mt19937_64 rng(1);
  Var w = tape.constant(random_tensor({4, 3, 5}, rng));
  Var b = tape.constant(Tensor({4}, std::vector<double>{0.5, -1.0, 2.0, 0.25}));
  Var y = conv1d(x, w, b, {2, 2, 1});
  ASSERT_EQ(y.shape(), (Shape{2, 4, 6}));
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t l = 0; l < 6; ++l) EXPECT_EQ(y.value().at({bi, c, l}), b.value()[c]);
}

TEST(Conv1d, ShapeErrorsNameTheDimension) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 3, 8}));
  Var w = tape.constant(Tensor({4, 2, 3}));
  Var b = tape.constant(Tensor({4}));
  try {
    conv1d(x, w, b, {1, 1, 1});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv1d(x, tape.constant(Tensor({4, 1, 3})), b, {1, 1, 2}), ShapeError);  // 3 % 2
  EXPECT_THROW(conv1d(tape.constant(Tensor({1, 3, 2})), tape.constant(Tensor({4, 3, 5})), b, {1, 0, 1}), ShapeError);
}

TEST(Conv1d, UnitKernelIdentityPassesGradientThrough) {
  Tape tape({.training = false, .record = true});
  std::mt19937_64 rng(2);
  Var x = tape.leaf(random_tensor({1, 3, 7}, rng));
  Tensor eye({3, 3, 1});
  for (std::size_t c = 0; c < 3; ++c) eye.at({c, c, 0}) = 1.0;
  Var y = conv1d(x, tape.constant(eye), tape.constant(Tensor({3})), {1, 0, 1});
  const Tensor g_out = random_tensor({1, 3, 7}, rng);
  tape.backward(weighted_sum(y, g_out));
  EXPECT_EQ(tape.grad(x), g_out);
}

TEST(Conv1d, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Tensor weights = random_tensor({1, 2, 6}, rng);
  auto fn = [&](Tape&, const std::vector<Var>& in) {
    return weighted_sum(conv1d(in[0], in[1], in[2], {1, 0, 1}), weights);
  };
  const auto r = grad_check(fn, {random_tensor({1, 2, 8}, rng), random_tensor({2, 2, 3}, rng), random_tensor({2}, rng)});
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_EQ(r.checked, 16u + 12u + 2u);
}

TEST(Conv1d, GroupsNeverMix) {
  std::mt19937_64 rng(4);
  Tape tape;
  Var x = tape.leaf(random_tensor({2, 4, 9}, rng));
  Var w = tape.leaf(random_tensor({4, 2, 3}, rng));
  Var b = tape.leaf(random_tensor({4}, rng));
  Var y = conv1d(x, w, b, {1, 1, 2});
  // Loss reads only output group 1 (channels 2, 3).
  Tensor mask = random_tensor({2, 4, 9}, rng);
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t l = 0; l < 9; ++l) mask.at({bi, c, l}) = 0.0;
  tape.backward(weighted_sum(y, mask));
  const Tensor gw = tape.grad(w);
  const Tensor gx = tape.grad(x);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(gw.at({o, i, k}), 0.0);
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t l = 0; l < 9; ++l) EXPECT_EQ(gx.at({bi, c, l}), 0.0);
  EXPECT_NE(gw.at({2, 0, 0}), 0.0);
}

TEST(Conv1d, OutputLengthPropertyOverRandomShapes) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> len_d(1, 60), k_d(1, 9), s_d(1, 5), p_d(0, 4);
  int checked = 0;
  while (checked < 200) {
    const std::size_t L = len_d(rng), k = k_d(rng), s = s_d(rng), p = p_d(rng);
    if (L + 2 * p < k) continue;
    Tape tape({.record = false});
    Var y = conv1d(tape.constant(Tensor({1, 1, L})), tape.constant(Tensor({1, 1, k})), tape.constant(Tensor({1})),
                   {s, p, 1});
    // Count valid output positions by direct enumeration of window starts.
    std::size_t expected = 0;
    for (std::size_t start = 0; start + k <= L + 2 * p; start += s) ++expected;
    EXPECT_EQ(y.dim(2), expected) << "L=" << L << " k=" << k << " s=" << s << " p=" << p;
    ++checked;
  }
}

TEST(Tape, BackwardRequiresRecordedTape) {
  Tape tape({.record = false});
  Var x = tape.leaf(Tensor({1}, 1.0));
  EXPECT_THROW(tape.backward(sum(x)), std::logic_error);
}

TEST(BatchNorm, ConstantInputNormalizesToZero) {
  BatchNorm1d bn("bn", 2);
  Tape tape({.training = true});
  Var y = bn(tape.constant(Tensor({3, 2, 4}, 2.5)));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, TwoSampleBatchClosedForm) {
  BatchNorm1d bn("bn", 3);
  Tape tape({.training = true});
  Tensor x({2, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    x.at({0, c}) = -1.0;
    x.at({1, c}) = 1.0;
  }
  Var y = bn(tape.constant(x));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(y.value().at({0, c}), -expected, 1e-15);
    EXPECT_NEAR(y.value().at({1, c}), expected, 1e-15);
  }
  // running stats: momentum 0.1 toward mean 0 and unbiased var 2.
  EXPECT_NEAR(bn.stats().running_var[0], 0.9 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  BatchNorm1d bn("bn", 2);
  bn.stats().eps = 0.0;
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 2, 5}, rng);
  Tape tape({.training = false});
  EXPECT_EQ(bn(tape.constant(x)).value(), x);
}

TEST(BatchNorm, SingleValuePerChannelInTrainingIsAnError) {
  BatchNorm1d bn("bn", 2);
  Tape tape({.training = true});
  EXPECT_THROW(bn(tape.constant(Tensor({1, 2}))), std::invalid_argument);
  EXPECT_THROW(bn(tape.constant(Tensor({1, 3, 4}))), ShapeError);
}

TEST(Elementwise, ClosedForms) {
  Tape tape({.training = true});
  EXPECT_EQ(gelu(tape.constant(Tensor::scalar(0.0))).value().item(), 0.0);
  Var ls = log_softmax(tape.constant(Tensor({3}, 0.7)));
  for (double v : ls.value().values()) EXPECT_NEAR(v, std::log(1.0 / 3.0), 1e-15);
  std::mt19937_64 rng(7);
  Var x = tape.constant(random_tensor({4, 5}, rng));
  EXPECT_EQ(dropout(x, 0.0, 1).value(), x.value());
  EXPECT_THROW(dropout(x, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(dropout(x, -0.1, 1), std::invalid_argument);
}

TEST(Elementwise, LogSoftmaxRowsExponentiateToOne) {
  std::mt19937_64 rng(8);
  Tape tape;
  Var y = log_softmax(tape.constant(random_tensor({6, 11}, rng, 5.0)));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 11; ++c) s += std::exp(y.value().at({r, c}));
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Dropout, EvalIsIdentityAndTrainingIsSeeded) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({8, 16}, rng);
  Tape eval({.training = false});
  EXPECT_EQ(dropout(eval.constant(x), 0.5, 3).value(), x);

  Tape a({.training = true, .seed = 11, .step = 4});
  Tape b({.training = true, .seed = 11, .step = 4});
  Tape c({.training = true, .seed = 11, .step = 5});
  const Tensor ya = dropout(a.constant(x), 0.5, 3).value();
  EXPECT_EQ(ya, dropout(b.constant(x), 0.5, 3).value());
  EXPECT_NE(ya, dropout(c.constant(x), 0.5, 3).value());
}

TEST(Attention, SingleFrameAttendsToItself) {
  Initializer init(10);
  MultiHeadSelfAttention mhsa("attn", {.model_dim = 8, .heads = 2, .dropout = 0.25}, 0, init);
  Tape tape;
  std::mt19937_64 rng(10);
  Tensor weights;
  mhsa(tape.constant(random_tensor({3, 1, 8}, rng)), &weights);
  for (double w : weights.values()) EXPECT_EQ(w, 1.0);
}

TEST(Attention, IdenticalFramesGiveIdenticalOutputs) {
  Initializer init(11);
  SelfAttentionBlock block("blk", {.model_dim = 8, .heads = 4, .dropout = 0.25}, 0, init);
  std::mt19937_64 rng(11);
  const Tensor frame = random_tensor({8}, rng);
  Tensor x({1, 5, 8});
  for (std::size_t f = 0; f < 5; ++f)
    for (std::size_t d = 0; d < 8; ++d) x.at({0, f, d}) = frame[d];
  Tape tape;
  const Tensor y = block(tape.constant(x)).value();
  for (std::size_t f = 1; f < 5; ++f)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(y.at({0, f, d}), y.at({0, 0, d}), 1e-12);
}

TEST(Attention, RowsAreDistributions) {
  Initializer init(12);
  MultiHeadSelfAttention mhsa("attn", {.model_dim = 16, .heads = 4, .dropout = 0.25}, 0, init);
  std::mt19937_64 rng(12);
  Tape tape({.training = true});
  Tensor weights;
  mhsa(tape.constant(random_tensor({2, 10, 16}, rng, 3.0)), &weights);
  const std::size_t rows = weights.numel() / 10;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 10; ++c) s += weights[r * 10 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Attention, ZeroFramesIsAnError) {
  Initializer init(13);
  MultiHeadSelfAttention mhsa("attn", {.model_dim = 8, .heads = 2, .dropout = 0.0}, 0, init);
  Tape tape;
  EXPECT_THROW(mhsa(tape.constant(Tensor({1, 0, 8}))), ShapeError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Initializer init(14);
  SelfAttentionBlock block("blk", {.model_dim = 8, .heads = 2, .dropout = 0.25}, 0, init);
  ParamList params;
  block.collect(params);
  std::mt19937_64 rng(14);
  const Tensor weights = random_tensor({1, 4, 8}, rng);
  auto fn = [&](Tape&, const std::vector<Var>& in) { return weighted_sum(block(in[0]), weights); };
  const auto r = grad_check(fn, {random_tensor({1, 4, 8}, rng)}, 1e-5, params, {.training = true, .seed = 3});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, LinearIsExact) {
  std::mt19937_64 rng(15);
  const Tensor weights = random_tensor({3, 4}, rng);
  auto fn = [&](Tape&, const std::vector<Var>& in) { return weighted_sum(linear(in[0], in[1], in[2]), weights); };
  const auto r = grad_check(fn, {random_tensor({3, 5}, rng), random_tensor({5, 4}, rng), random_tensor({4}, rng)});
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradCheck, Gelu) {
  std::mt19937_64 rng(16);
  const Tensor weights = random_tensor({20}, rng);
  auto fn = [&](Tape&, const std::vector<Var>& in) { return weighted_sum(gelu(in[0]), weights); };
  EXPECT_LT(grad_check(fn, {random_tensor({20}, rng, 2.0)}).max_relative_error, 1e-4);
}

TEST(GradCheck, SoftmaxNll) {
  std::mt19937_64 rng(17);
  Tensor onehot({4, 6});
  for (std::size_t r = 0; r < 4; ++r) onehot.at({r, (r * 5) % 6}) = -1.0;
  auto fn = [&](Tape& t, const std::vector<Var>& in) { return mean(mul(log(softmax(in[0])), t.constant(onehot))); };
  EXPECT_LT(grad_check(fn, {random_tensor({4, 6}, rng, 2.0)}).max_relative_error, 1e-4);
}

TEST(GradCheck, NormsAndShapeOps) {
  std::mt19937_64 rng(18);
  const Tensor w3 = random_tensor({3, 4, 5}, rng);
  BatchNormStats stats{Tensor({4}), Tensor({4}, 1.0)};
  auto fn = [&](Tape& t, const std::vector<Var>& in) {
    Var bn = batch_norm(in[0], in[1], in[2], stats);
    // [B, C, L] -> [L, B, C] so layer norm mixes channels, not positions.
    Var p = permute(bn, {2, 0, 1});
    Var ln = layer_norm(p, in[3], in[4]);
    Var back = permute(ln, {1, 2, 0});
    Var pooled = mean_axis(back, 2, true);
    Var gate = sigmoid(pooled);
    return add(weighted_sum(mul(back, gate), w3), sum(scale(t.constant(Tensor({1}, 0.0)), 1.0)));
  };
  const auto r = grad_check(fn,
                            {random_tensor({3, 4, 5}, rng), random_tensor({4}, rng), random_tensor({4}, rng),
                             random_tensor({4}, rng), random_tensor({4}, rng)},
                            1e-5, {}, {.training = true});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, ExpAndRowNormalization) {
  std::mt19937_64 rng(19);
  const Tensor weights = random_tensor({3, 5}, rng);
  auto fn = [&](Tape&, const std::vector<Var>& in) { return weighted_sum(exp(l2_normalize(in[0])), weights); };
  EXPECT_LT(grad_check(fn, {random_tensor({3, 5}, rng)}).max_relative_error, 1e-4);
  Tape tape({.record = false});
  const Tensor unit = l2_normalize(tape.constant(Tensor({1, 2}, std::vector<double>{3.0, 4.0}))).value();
  EXPECT_DOUBLE_EQ(unit[0], 0.6);
  EXPECT_DOUBLE_EQ(unit[1], 0.8);
}
