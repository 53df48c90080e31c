#include <gtest/gtest.h>

#include "dynflow/ops.hpp"
#include "dynflow/tensor.hpp"

using namespace dynflow;

TEST(Tensor, ConstructionAndShape) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t[5], 1.5);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_EQ(shape_str({2, 3}), "[2,3]");
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(Tensor({2}).item(), ContractError);
}

TEST(Tensor, BackwardRequiresScalar) {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Tensor, ChainRuleThroughSharedSubexpression) {
  // y = (x * x) + x, dy/dx = 2x + 1
  Tensor x(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  Tensor sq = mul(x, x);
  sum(add(sq, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor x(Shape{1}, 2.0);
  x.set_requires_grad(true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, DetachStopsGradient) {
  Tensor x(Shape{1}, 2.0);
  x.set_requires_grad(true);
  Tensor y = mul(x, x.detach());
  sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x(Shape{1}, 2.0);
  x.set_requires_grad(true);
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    Tensor y = scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Tensor, NodesVisitedInDescendingCreationOrder) {
  Tensor x(Shape{1}, 1.0);
  x.set_requires_grad(true);
  Tensor a = scale(x, 2.0);
  Tensor b = scale(a, 3.0);
  Tensor c = add(a, b);
  EXPECT_LT(a.node_ptr()->seq, b.node_ptr()->seq);
  EXPECT_LT(b.node_ptr()->seq, c.node_ptr()->seq);
  sum(c).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}
