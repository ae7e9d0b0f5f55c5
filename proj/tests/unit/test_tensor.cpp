#include <gtest/gtest.h>

#include "flexidepth/errors.hpp"
#include "flexidepth/ops.hpp"
#include "flexidepth/tensor.hpp"

using namespace flexidepth;

TEST(Tensor, DataLengthMatchesShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), InvalidArgument);
  Tensor t({2, 3}, std::vector<double>(6, 1.5));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
}

TEST(Tensor, CopiesShareStorage) {
  Tensor a = Tensor::zeros({2});
  Tensor b = a;
  b.mutable_data()[0] = 4.0;
  EXPECT_EQ(a.data()[0], 4.0);
  Tensor c = a.detach();
  c.mutable_data()[0] = 1.0;
  EXPECT_EQ(a.data()[0], 4.0);
}

TEST(Tensor, GradHasDataShape) {
  Tensor w = Tensor::full({3, 2}, 0.5, true);
  sum(square(w)).backward();
  ASSERT_TRUE(w.has_grad());
  EXPECT_EQ(w.grad().size(), w.numel());
  for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Tensor, NonParticipatingParameterHasZeroGrad) {
  Tensor used = Tensor::full({2}, 1.0, true);
  Tensor unused = Tensor::full({2}, 1.0, true);
  sum(mul(used, used)).backward();
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, RequiresGradOnlyOnLeaves) {
  Tensor w = Tensor::full({2}, 1.0, true);
  Tensor y = scale(w, 2.0);
  EXPECT_FALSE(y.is_leaf());
  EXPECT_THROW(y.set_requires_grad(false), StateError);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor w = Tensor::full({1}, 3.0, true);
  sum(scale(w, 2.0)).backward();
  sum(scale(w, 2.0)).backward(0.5);
  EXPECT_DOUBLE_EQ(w.grad()[0], 3.0);
  w.zero_grad();
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  Tensor w = Tensor::full({1}, 2.0, true);
  Tensor y = square(w);
  sum(add(y, y)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 8.0);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor w = Tensor::full({2}, 1.0, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    Tensor y = scale(w, 3.0);
    EXPECT_TRUE(y.is_leaf());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor w = Tensor::full({2}, 1.0, true);
  EXPECT_THROW(scale(w, 2.0).backward(), InvalidArgument);
}

TEST(Tensor, UndefinedTensorAccessThrows) {
  Tensor t;
  EXPECT_FALSE(t.defined());
  EXPECT_THROW(t.shape(), StateError);
}
