#include <gtest/gtest.h>

#include <cmath>

#include "x2ct/gradcheck_suite.hpp"
#include "x2ct/tensor.hpp"

using namespace x2ct;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, SplitMix64& rng) {
  Tensor t({r, c});
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST(Matmul, IdentityLeftFactor) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var b = tape.leaf(Tensor::matrix(2, 2, {3, 4, 5, 6}));
  EXPECT_EQ(tape.value(matmul(a, b)), Tensor::matrix(2, 2, {3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  Tape tape;
  Var out = matmul(tape.leaf(Tensor::matrix(1, 2, {1, 2})), tape.leaf(Tensor::matrix(2, 1, {3, 4})));
  EXPECT_EQ(tape.value(out), Tensor::matrix(1, 1, {11}));
}

TEST(Matmul, RejectsMismatchedInnerDims) {
  Tape tape;
  EXPECT_THROW(matmul(tape.leaf(Tensor({2, 3})), tape.leaf(Tensor({2, 3}))), ShapeError);
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  SplitMix64 rng(1);
  const double err = grad_check([](Tape&, std::span<const Var> x) { return sum(matmul(x[0], x[1])); },
                                {random_matrix(4, 5, rng), random_matrix(5, 3, rng)});
  EXPECT_LT(err, 1e-6);
}

TEST(L2Normalize, ThreeFourFive) {
  Tape tape;
  const Tensor out = tape.value(l2_normalize_rows(tape.leaf(Tensor::matrix(1, 2, {3, 4}))));
  EXPECT_NEAR(out.data[0], 0.6, 1e-15);
  EXPECT_NEAR(out.data[1], 0.8, 1e-15);
}

TEST(L2Normalize, ZeroRowPassesThrough) {
  Tape tape;
  const Tensor out = tape.value(l2_normalize_rows(tape.leaf(Tensor::matrix(1, 2, {0, 0})), 1e-12));
  EXPECT_EQ(out, Tensor::matrix(1, 2, {0, 0}));
}

TEST(L2Normalize, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(2);
  const Tensor w = random_matrix(3, 4, rng);
  const double err = grad_check(
      [&](Tape& t, std::span<const Var> x) { return sum(mul(l2_normalize_rows(x[0]), t.leaf(w))); },
      {random_matrix(3, 4, rng)});
  EXPECT_LT(err, 1e-6);
}

TEST(Similarity, OrthonormalBasis) {
  Tape tape;
  Var e = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  EXPECT_EQ(tape.value(similarity(e, e)), Tensor::matrix(2, 2, {1, 0, 0, 1}));
}

TEST(Similarity, AntipodalRowGivesMinusOne) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix(1, 2, {0.6, 0.8}));
  Var b = tape.leaf(Tensor::matrix(1, 2, {-0.6, -0.8}));
  EXPECT_DOUBLE_EQ(tape.value(similarity(a, b)).item(), -1.0);
}

TEST(Similarity, MatchesDoubleLoop) {
  SplitMix64 rng(3);
  Tape tape;
  Var a = l2_normalize_rows(tape.leaf(random_matrix(5, 8, rng)));
  Var b = l2_normalize_rows(tape.leaf(random_matrix(5, 8, rng)));
  const Tensor s = tape.value(similarity(a, b));
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 8; ++k) dot += av(i, k) * bv(j, k);
      EXPECT_NEAR(s(i, j), dot, 1e-12);
    }
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogN) {
  Tape tape;
  const std::vector<std::size_t> targets{0, 1, 2, 3};
  Var loss = softmax_cross_entropy_rows(tape.leaf(Tensor({4, 4})), targets);
  EXPECT_NEAR(tape.value(loss).item(), std::log(4.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, LargeMarginIsStable) {
  Tape tape;
  const std::vector<std::size_t> targets{0};
  Var loss = softmax_cross_entropy_rows(tape.leaf(Tensor::matrix(1, 2, {10, -10})), targets);
  // log(1 + exp(-20))
  EXPECT_NEAR(tape.value(loss).item(), 2.061153620314381e-09, 1e-20);
}

TEST(SoftmaxCrossEntropy, HugeLogitsStayFinite) {
  Tape tape;
  const std::vector<std::size_t> targets{1};
  Var loss = softmax_cross_entropy_rows(tape.leaf(Tensor::matrix(1, 2, {1000, 999})), targets);
  EXPECT_NEAR(tape.value(loss).item(), std::log1p(std::exp(1.0)), 1e-12);
}

TEST(SoftmaxCrossEntropy, SumIsNTimesMean) {
  SplitMix64 rng(4);
  const Tensor logits = random_matrix(3, 3, rng);
  const std::vector<std::size_t> targets{2, 0, 1};
  Tape tape;
  const double mean = tape.value(softmax_cross_entropy_rows(tape.leaf(logits), targets, Reduction::Mean)).item();
  const double total = tape.value(softmax_cross_entropy_rows(tape.leaf(logits), targets, Reduction::Sum)).item();
  EXPECT_NEAR(total, 3.0 * mean, 1e-14);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(5);
  const std::vector<std::size_t> targets{1, 2, 0};
  const double err = grad_check(
      [&](Tape&, std::span<const Var> x) { return softmax_cross_entropy_rows(x[0], targets); },
      {random_matrix(3, 3, rng)});
  EXPECT_LT(err, 1e-5);
}

TEST(SoftmaxCrossEntropy, RejectsOutOfRangeTarget) {
  Tape tape;
  const std::vector<std::size_t> targets{5};
  EXPECT_THROW(softmax_cross_entropy_rows(tape.leaf(Tensor({1, 2})), targets), Error);
}

TEST(GradCheck, LinearFunctionHasAllOnesGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 3, {0.3, -2.0, 7.0}), true);
  tape.backward(sum(x));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(1, 3, {1, 1, 1}));
  const double err =
      grad_check([](Tape&, std::span<const Var> v) { return sum(v[0]); }, {Tensor::matrix(1, 3, {0.3, -2.0, 7.0})});
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, QuadraticAtOneTwo) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {1, 2}), true);
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(1, 2, {2, 4}));
  const double err =
      grad_check([](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, {Tensor::matrix(1, 2, {1, 2})});
  EXPECT_LT(err, 1e-8);
}

TEST(Tape, BackwardRequiresScalarRoot) {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2}), true);
  EXPECT_THROW(tape.backward(relu(x)), ShapeError);
}

TEST(Tape, GradientAccumulatesOverReuse) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {1.5, -0.5}), true);
  tape.backward(sum(add(x, add(x, x))));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(1, 2, {3, 3}));
}

TEST(Tape, NonGradLeafReceivesNoGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 2, {1, 2}), true);
  Var c = tape.leaf(Tensor::matrix(1, 2, {3, 4}), false);
  tape.backward(sum(mul(x, c)));
  EXPECT_EQ(tape.grad(x), Tensor::matrix(1, 2, {3, 4}));
  EXPECT_EQ(tape.grad(c), Tensor({1, 2}));
}

TEST(MeanPool, AveragesConsecutiveGroups) {
  Tape tape;
  Var out = mean_pool_rows(tape.leaf(Tensor::matrix(4, 1, {1, 3, 5, 9})), 2);
  EXPECT_EQ(tape.value(out), Tensor::matrix(2, 1, {2, 7}));
  EXPECT_THROW(mean_pool_rows(tape.leaf(Tensor({3, 1})), 2), ShapeError);
}

TEST(SigmoidBce, MaskedEntriesDoNotContribute) {
  Tape tape;
  const std::vector<double> targets{1, 0}, mask{1, 0};
  Var x = tape.leaf(Tensor::matrix(1, 2, {0.0, 50.0}), true);
  Var loss = sigmoid_bce(x, targets, mask);
  EXPECT_NEAR(tape.value(loss).item(), std::log(2.0), 1e-15);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x).data[1], 0.0);
}

TEST(GradCheckSuite, EveryOpPassesOverTwentySeeds) {
  for (const auto& c : run_gradcheck_suite(20)) {
    SCOPED_TRACE(c.name);
    EXPECT_LT(c.worst, 1e-4);
  }
}
